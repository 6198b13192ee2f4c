use rand::Rng;

/// Dense NCHW activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// How a parameter is initialised at construction.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    Zeros,
    Ones,
    /// He-uniform: U(−√(6/fan_in), √(6/fan_in)).
    HeUniform { fan_in: usize },
}

/// Named weight buffer. Non-trainable entries (batch-norm running statistics)
/// carry no gradient and are skipped by the optimiser.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], init: ParamInit, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let value = match init {
            ParamInit::Zeros => vec![0.0; len],
            ParamInit::Ones => vec![1.0; len],
            ParamInit::HeUniform { fan_in } => {
                let limit = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], fill: f32) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![fill; len],
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
