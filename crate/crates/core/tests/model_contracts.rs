use tongue_core::models::{frames_to_tensor, symbolic_param_count, Arch, Checkpoint, Model, ModelSpec};
use tongue_core::nn::Module;
use tongue_core::Heatmap;

fn small_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec {
            unet_channels: vec![4, 8],
            input_size: 16,
            ..ModelSpec::default()
        },
        ModelSpec {
            unet_channels: vec![3, 5, 7],
            input_size: 16,
            ..ModelSpec::default()
        },
        ModelSpec {
            arch: Arch::DenseUnet,
            densenet_block_sizes: vec![2, 3],
            densenet_growth: 4,
            up_growth_rates: vec![2, 3, 2],
            input_size: 32,
            ..ModelSpec::default()
        },
        ModelSpec {
            arch: Arch::DenseUnet,
            densenet_block_sizes: vec![1],
            densenet_growth: 6,
            up_growth_rates: vec![5, 4],
            input_size: 16,
            ..ModelSpec::default()
        },
    ]
}

#[test]
fn built_parameter_counts_match_the_symbolic_counter() {
    let mut specs = small_specs();
    specs.push(ModelSpec::new(Arch::Unet, 128));
    specs.push(ModelSpec::new(Arch::DenseUnet, 128));
    for spec in specs {
        let model = Model::build(&spec).unwrap();
        assert_eq!(model.num_trainable(), symbolic_param_count(&spec), "{spec:?}");
    }
}

#[test]
fn small_models_emit_probability_maps_at_input_resolution() {
    for spec in small_specs() {
        let model = Model::build(&spec).unwrap();
        let frame = Heatmap::filled(spec.input_size, spec.input_size, 0.3).unwrap();
        let out = model.infer(&frames_to_tensor(&[&frame, &frame]).unwrap());
        assert_eq!(out.shape(), [2, 1, spec.input_size, spec.input_size]);
        assert!(out.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn input_sizes_must_divide_by_the_downsampling_factor() {
    assert!(ModelSpec::new(Arch::Unet, 40).validate().is_err());
    assert!(ModelSpec::new(Arch::DenseUnet, 48).validate().is_err());
    assert!(ModelSpec::new(Arch::DenseUnet, 64).validate().is_ok());
}

#[test]
fn checkpoint_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in small_specs().into_iter().enumerate() {
        let model = Model::build(&ModelSpec { seed: 17, ..spec.clone() }).unwrap();
        let sub = dir.path().join(i.to_string());
        Checkpoint::new(model.clone(), None).save(&sub).unwrap();
        let loaded = Checkpoint::load(&sub).unwrap();
        assert_eq!(loaded.model.spec(), model.spec());
        let frame = Heatmap::filled(spec.input_size, spec.input_size, 0.7).unwrap();
        let x = frames_to_tensor(&[&frame]).unwrap();
        assert_eq!(loaded.model.infer(&x).data, model.infer(&x).data);
    }
}
