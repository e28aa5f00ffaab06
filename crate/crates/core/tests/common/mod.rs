//! Randomized invariant checks shared by the `invariants` and `acceptance`
//! test targets.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use embref::body_language::{BodyEncoder, PosEmbed, TransformerDims};
use embref::fixtures::{generate_scene, horizontal_flip, write_dataset, DatasetReader, GeneratorConfig, Split};
use embref::geometry::CoordinateMaps;
use embref::losses::{attention_loss, regression_loss};
use embref::nn::{softmax_last, ParamStore};
use embref::relation::{spatial_attention, GestureAttention};

pub const CASES: u32 = 200;

pub const PROPERTIES: [&str; 9] = [
    "body vector has unit norm",
    "spatial attention lies in [-1, 1]",
    "spatial attention is invariant to positive scaling",
    "gesture attention sums to one",
    "regression loss lies in [0, 2]",
    "attention loss lies in [0, 1]",
    "embodied coordinates have zero sender mean",
    "horizontal flip is an involution",
    "dataset round trip is the identity",
];

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TestCaseError> {
    Tensor::from_vec(data, shape, &Device::Cpu).map_err(fail)
}

fn small_dims() -> TransformerDims {
    TransformerDims {
        channels: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
    }
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| v.map(|x| x / n))
}

fn array3(h: usize, w: usize, data: Vec<f64>) -> Array3<f64> {
    Array3::from_shape_vec((h, w, 3), data).expect("strategy sizes match")
}

fn scene_config() -> GeneratorConfig {
    GeneratorConfig::default().with_image_size(64)
}

/// Runs property `name` on `cases` random inputs. Errors carry the
/// minimal failing input.
pub fn check(name: &str, cases: u32) -> Result<(), String> {
    let mut r = runner(cases);
    let result = match name {
        "body vector has unit norm" => r.run(
            &(any::<u64>(), 0.0..20.0f64, prop::collection::vec(-1.0..1.0f64, 2 * 16 * 8)),
            |(seed, scale, data)| {
                let mut store = ParamStore::new(DType::F64, seed);
                let enc = BodyEncoder::new(&mut store, "body", small_dims(), 16, PosEmbed::Learned).map_err(fail)?;
                let m = (tensor(data, &[2, 4, 4, 8])? * scale).map_err(fail)?;
                let l = enc.forward(&m).map_err(fail)?.l;
                let norms = l.sqr().and_then(|t| t.sum(1)).and_then(|t| t.sqrt()).and_then(|t| t.to_vec1::<f64>()).map_err(fail)?;
                for n in norms {
                    prop_assert!((n - 1.0).abs() <= 1e-6, "norm {n}");
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "spatial attention lies in [-1, 1]" => r.run(
            &(prop::array::uniform3(-1.0..1.0f64), prop::collection::vec(-5.0..5.0f64, 8 * 8 * 3)),
            |(l, p)| {
                let Some(l) = unit(l) else { return Ok(()) };
                let a = spatial_attention(l, array3(8, 8, p).view());
                for &v in &a {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), "value {v}");
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "spatial attention is invariant to positive scaling" => r.run(
            &(
                prop::array::uniform3(-1.0..1.0f64),
                prop::collection::vec(-5.0..5.0f64, 8 * 8 * 3),
                1e-3..1e3f64,
            ),
            |(l, p, k)| {
                let Some(l) = unit(l) else { return Ok(()) };
                let p = array3(8, 8, p);
                let a = spatial_attention(l, p.view());
                let b = spatial_attention(l, (&p * k).view());
                let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                prop_assert!(diff <= 1e-9, "max difference {diff} at scale {k}");
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "gesture attention sums to one" => r.run(
            &(
                any::<u64>(),
                prop::collection::vec(-3.0..3.0f64, 2 * 16 * 8),
                prop::collection::vec(-2.0..2.0f64, 2 * 16),
            ),
            |(seed, m, gate)| {
                let mut store = ParamStore::new(DType::F64, seed);
                let g = GestureAttention::new(&mut store, "gesture", small_dims(), 16, PosEmbed::Learned).map_err(fail)?;
                let (_, a) = g
                    .forward(&tensor(m, &[2, 4, 4, 8])?, &tensor(gate, &[2, 4, 4, 1])?)
                    .map_err(fail)?;
                let sums = a.flatten_from(1).and_then(|t| t.sum(1)).and_then(|t| t.to_vec1::<f64>()).map_err(fail)?;
                for s in sums {
                    prop_assert!((s - 1.0).abs() <= 1e-5, "sum {s}");
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "regression loss lies in [0, 2]" => r.run(
            &(prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(-10.0..10.0f64)),
            |(l, p)| {
                let (Some(l), Some(_)) = (unit(l), unit(p)) else { return Ok(()) };
                let v = regression_loss(l, p).map_err(fail)?;
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v), "loss {v}");
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "attention loss lies in [0, 1]" => r.run(
            &(
                prop::collection::vec(-10.0..10.0f64, 64),
                prop::collection::vec(any::<bool>(), 64),
            ),
            |(logits, mask)| {
                let a = softmax_last(&tensor(logits, &[1, 64])?)
                    .and_then(|t| Ok(t.reshape((1, 8, 8))?))
                    .map_err(fail)?;
                let mask = tensor(mask.iter().map(|&b| f64::from(u8::from(b))).collect(), &[1, 8, 8])?;
                let v = attention_loss(&a, &mask).and_then(|t| Ok(t.to_scalar::<f64>()?)).map_err(fail)?;
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "loss {v}");
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "embodied coordinates have zero sender mean" => r.run(
            &(4usize..24, 4usize..24).prop_flat_map(|(h, w)| {
                (
                    Just((h, w)),
                    prop::collection::vec(0.0..=1.0f32, h * w),
                    prop::collection::vec(any::<bool>(), h * w),
                    0..h * w,
                )
            }),
            |((h, w), depth, mask, forced)| {
                let depth = Array2::from_shape_vec((h, w), depth).expect("sizes");
                let mut mask = Array2::from_shape_vec((h, w), mask.iter().map(|&b| u8::from(b)).collect()).expect("sizes");
                mask[[forced / w, forced % w]] = 1;
                let maps = CoordinateMaps::build(depth.view(), mask.view()).map_err(fail)?;
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for ((r, c), &m) in mask.indexed_iter() {
                    if m == 1 {
                        for k in 0..3 {
                            sum[k] += maps.embodied[[r, c, k]];
                        }
                        n += 1.0;
                    }
                }
                for s in sum {
                    prop_assert!((s / n).abs() <= 1e-6, "masked mean {}", s / n);
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string()),
        "horizontal flip is an involution" => r.run(&any::<u64>(), |seed| {
            let cfg = scene_config();
            let scene = generate_scene(seed, &cfg).map_err(fail)?;
            let twice = horizontal_flip(&horizontal_flip(&scene, &cfg.vocabulary), &cfg.vocabulary);
            prop_assert_eq!(twice, scene);
            Ok(())
        })
        .map_err(|e| e.to_string()),
        "dataset round trip is the identity" => {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let count = std::cell::Cell::new(0usize);
            r.run(&any::<u64>(), |seed| {
                let cfg = scene_config();
                let mut scene = generate_scene(seed, &cfg).map_err(fail)?;
                scene.sample_id = format!("case_{seed}");
                count.set(count.get() + 1);
                let root = dir.path().join(count.get().to_string());
                write_dataset(&root, &cfg, &[(Split::Train, &scene)]).map_err(fail)?;
                let back = DatasetReader::open(&root).and_then(|r| r.load(Split::Train, 0)).map_err(fail)?;
                prop_assert_eq!(back, scene);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }
        other => return Err(format!("unknown property {other}")),
    };
    result
}
