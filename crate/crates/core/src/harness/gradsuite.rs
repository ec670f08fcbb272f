//! Finite-difference verification of every differentiable operation and of
//! the assembled network, at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Conv2dSpec, Graph, OrthoMode, Var};
use crate::error::Result;
use crate::losses::{l1_data_loss, total_loss, weight_rows, LossConfig};
use crate::net::{Alignment, GrtnConfig, GrtnParams, Net};
use crate::params::{Bound, ParamStore};
use crate::rsste::{rsste_forward, sste_layer, AttentionKind, RssteConfig, RssteParams};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.max_abs_grad > 0.0
    }
}

pub fn to_csv(cases: &[GradCase]) -> String {
    let mut out = String::from("op,max_rel_error,checked,status\n");
    for c in cases {
        out.push_str(&format!(
            "{},{:.3e},{},{}\n",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn t(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.gen_range(-1.0..1.0))
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn away(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.gen_range(0.1..1.0);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }
}

/// `Σ out ⊙ r` with a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0xFEED));
    let r = g.constant(gen.t(g.shape(out)));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, opts: GradCheckOptions, f: Builder) -> Result<GradCase> {
    Ok(GradCase {
        name,
        report: finite_diff_check(&inputs, opts, f)?,
    })
}

fn conv_case(name: &'static str, gen: &mut Gen, cin: usize, cout: usize, spec: Conv2dSpec) -> Result<GradCase> {
    let inputs = vec![
        gen.t(&[2, cin, 5, 6]),
        gen.t(&[cout, cin / spec.groups, 3, 3]),
        gen.t(&[cout]),
    ];
    case(
        name,
        inputs,
        GradCheckOptions::default(),
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(g, y, 1)
        }),
    )
}

fn rsste_store(cfg: &RssteConfig, seed: u64) -> (ParamStore<f64>, RssteParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = RssteParams::init(&mut store, "rsste", cfg, &mut rng);
    // Non-trivial out map and bias so every path carries gradient.
    for id in [p.out_w, p.out_b] {
        let t = Tensor::from_fn(store.get(id).shape(), |_| rng.gen_range(-0.5..0.5));
        *store.get_mut(id) = t;
    }
    (store, p)
}

/// Runs every check; the slowest (full network) comes last.
pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(2024));
    let opts = GradCheckOptions::default();
    let mut out = vec![
        conv_case("conv2d", &mut gen, 4, 6, Conv2dSpec::same(3))?,
        conv_case("conv2d_groups2", &mut gen, 4, 6, Conv2dSpec::same(3).with_groups(2))?,
        conv_case("conv2d_groups_half", &mut gen, 6, 6, Conv2dSpec::same(3).with_groups(3))?,
        conv_case("conv2d_stride2", &mut gen, 3, 4, Conv2dSpec::same(3).with_stride(2))?,
        case(
            "leaky_relu",
            vec![gen.away(&[3, 7])],
            opts,
            Box::new(|g, v| {
                let y = g.leaky_relu(v[0], 0.1);
                project(g, y, 2)
            }),
        )?,
        case(
            "sigmoid",
            vec![gen.t(&[3, 7])],
            opts,
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, 3)
            }),
        )?,
        case(
            "gelu",
            vec![gen.t(&[3, 7])],
            opts,
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                project(g, y, 4)
            }),
        )?,
        case(
            "softmax",
            vec![gen.t(&[2, 3, 5])],
            opts,
            Box::new(|g, v| {
                let a = g.softmax(v[0], 2)?;
                let b = g.softmax(v[0], 1)?;
                let s = g.add(a, b)?;
                project(g, s, 5)
            }),
        )?,
        case(
            "layer_norm",
            vec![gen.t(&[4, 6]), gen.t(&[6]), gen.t(&[6])],
            opts,
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 6)
            }),
        )?,
        case(
            "linear",
            vec![gen.t(&[2, 3, 4]), gen.t(&[4, 5]), gen.t(&[5])],
            opts,
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, 7)
            }),
        )?,
        case(
            "pixel_shuffle",
            vec![gen.t(&[2, 8, 3, 2])],
            opts,
            Box::new(|g, v| {
                let y = g.pixel_shuffle(v[0], 2)?;
                project(g, y, 8)
            }),
        )?,
        case(
            "interleave_concat",
            vec![gen.t(&[1, 3, 2, 2]), gen.t(&[1, 3, 2, 2])],
            opts,
            Box::new(|g, v| {
                let y = g.interleave_concat(v[0], v[1])?;
                project(g, y, 9)
            }),
        )?,
        case(
            "window_ops",
            vec![gen.t(&[1, 2, 5, 5])],
            opts,
            Box::new(|g, v| {
                let (w, geom) = g.window_partition(v[0], 4, 2)?;
                let sq = g.mul(w, w)?;
                let back = g.window_reverse(sq, &geom)?;
                project(g, back, 10)
            }),
        )?,
    ];
    for (name, kind) in [
        ("euclidean_attention", AttentionKind::Euclidean),
        ("dot_product_attention", AttentionKind::DotProduct),
    ] {
        out.push(case(
            name,
            vec![gen.t(&[2, 6, 4]), gen.t(&[2, 6, 4]), gen.t(&[2, 6, 4]), gen.t(&[2, 6, 6])],
            opts,
            Box::new(move |g, v| {
                let y = g.attention(v[0], v[1], v[2], Some(v[3]), 2, kind, 1e-12)?;
                project(g, y, 11)
            }),
        )?);
    }
    out.push(case(
        "blend",
        vec![gen.t(&[2, 3, 2, 2]), gen.t(&[2, 3, 2, 2]), gen.t(&[2, 3, 2, 2])],
        opts,
        Box::new(|g, v| {
            let w = g.sigmoid(v[0]);
            let y = g.blend(w, v[1], v[2])?;
            project(g, y, 12)
        }),
    )?);

    let rcfg = RssteConfig {
        layers: 2,
        window: 2,
        heads: 2,
        channels: 4,
        attention_kind: AttentionKind::Euclidean,
        mlp_ratio: 2,
        epsilon_norm: 1e-12,
    };
    let (store, layout) = rsste_store(&rcfg, 5);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, t)| t.clone()).collect();
    let n = inputs.len();
    {
        let layout = layout.clone();
        let mut tok_inputs = inputs.clone();
        tok_inputs.push(gen.t(&[3, 4, 4]));
        out.push(case(
            "sste_layer",
            tok_inputs,
            opts,
            Box::new(move |g, v| {
                let bound = Bound::from_vars(v[..n].to_vec());
                let y = sste_layer(g, v[n], &layout.layers[0], &bound, &rcfg)?;
                project(g, y, 13)
            }),
        )?);
    }
    inputs.push(gen.t(&[1, 4, 4, 6]));
    out.push(case(
        "rsste",
        inputs,
        opts,
        Box::new(move |g, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            let y = rsste_forward(g, v[n], &layout, &bound, &rcfg)?;
            project(g, y, 14)
        }),
    )?);

    for (name, mode) in [
        ("orthogonality_signed", OrthoMode::Signed),
        ("orthogonality_absolute", OrthoMode::Absolute),
    ] {
        out.push(case(
            name,
            vec![gen.t(&[3, 4]), gen.t(&[4, 2])],
            opts,
            Box::new(move |g, v| g.orthogonality(v, mode)),
        )?);
    }
    out.push(case(
        "l1_data_loss",
        vec![gen.away(&[2, 1, 3, 3])],
        opts,
        Box::new(|g, v| {
            let zero = g.constant(Tensor::zeros(g.shape(v[0])));
            l1_data_loss(g, v[0], zero)
        }),
    )?);
    out.push(case(
        "total_loss",
        vec![gen.away(&[2, 1, 3, 3]), gen.t(&[3, 4]), gen.t(&[5, 3])],
        opts,
        Box::new(|g, v| {
            let zero = g.constant(Tensor::zeros(g.shape(v[0])));
            let data = l1_data_loss(g, v[0], zero)?;
            let cfg = LossConfig {
                lambda: 0.5,
                ortho_mode: OrthoMode::Signed,
            };
            total_loss(g, data, &v[1..], &cfg)
        }),
    )?);
    out.push(grtn_two_frame_case()?);
    Ok(out)
}

/// Every parameter of a tiny network through two recurrent steps and the
/// full training objective.
pub fn grtn_two_frame_case() -> Result<GradCase> {
    let cfg = GrtnConfig {
        alignment: Alignment::GlobalShift,
        ..GrtnConfig::tiny()
    };
    let params = GrtnParams::<f64>::init(&cfg, 11)?;
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(77));
    // The second frame is the first moved two pixels right, so the estimated
    // shift is unambiguous and stays fixed under the finite-difference nudges.
    let first = gen.t(&[1, 1, 8, 8]);
    let second = Tensor::from_fn(&[1, 1, 8, 8], |i| first.data()[(i / 8) * 8 + (i % 8 + 6) % 8]);
    let frames = [first, second];
    let targets = [gen.t(&[1, 1, 8, 8]).map(|v| v + 3.0), gen.t(&[1, 1, 8, 8]).map(|v| v + 3.0)];
    let inputs: Vec<Tensor<f64>> = params.store.iter().map(|(_, _, t)| t.clone()).collect();
    let layout = params.layout.clone();
    let loss_cfg = LossConfig::default();
    let report = finite_diff_check(&inputs, GradCheckOptions::default(), move |g, v| {
        let bound = Bound::from_vars(v.to_vec());
        let net = Net {
            config: &cfg,
            layout: &layout,
            bound: &bound,
        };
        let mut state = None;
        let mut data = None;
        for (x, y) in frames.iter().zip(&targets) {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let (pred, next) = net.step(g, state, xv, &[25.0])?;
            state = Some(next);
            // Targets sit far from any prediction, keeping |ŷ − y| smooth.
            let l = l1_data_loss(g, pred, yv)?;
            data = Some(match data {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let mats = weight_rows(g, &bound, &layout.rsste_linear_weights())?;
        let data = data.expect("two frames");
        total_loss(g, data, &mats, &loss_cfg)
    })?;
    Ok(GradCase {
        name: "grtn_two_frame_step",
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_cases_pass() {
        let cases = run_suite().unwrap();
        for c in &cases {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
        assert!(to_csv(&cases).starts_with("op,max_rel_error,checked,status\n"));
    }
}
