use super::BinaryImage;

/// Zhang-Suen parallel thinning, iterated to a fixpoint. Pixels outside the
/// image count as background.
pub fn skeletonize(binary: &BinaryImage) -> BinaryImage {
    let mut img = binary.clone();
    let (w, h) = (img.width, img.height);
    let mut marked = Vec::new();
    loop {
        let mut changed = false;
        for first_pass in [true, false] {
            marked.clear();
            for y in 0..h {
                for x in 0..w {
                    if img.get(x, y) && deletable(&img, x, y, first_pass) {
                        marked.push(y * w + x);
                    }
                }
            }
            changed |= !marked.is_empty();
            for &i in &marked {
                img.data[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Neighbours P2..P9 clockwise from north.
fn neighbours(img: &BinaryImage, x: usize, y: usize) -> [bool; 8] {
    let at = |dx: isize, dy: isize| {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        nx >= 0
            && ny >= 0
            && (nx as usize) < img.width
            && (ny as usize) < img.height
            && img.get(nx as usize, ny as usize)
    };
    [
        at(0, -1),
        at(1, -1),
        at(1, 0),
        at(1, 1),
        at(0, 1),
        at(-1, 1),
        at(-1, 0),
        at(-1, -1),
    ]
}

fn deletable(img: &BinaryImage, x: usize, y: usize, first_pass: bool) -> bool {
    let p = neighbours(img, x, y);
    let b = p.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = p;
    if first_pass {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}
