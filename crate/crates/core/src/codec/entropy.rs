//! Latent quantization, likelihoods, and the coding tables built from them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{get, Bound, CodecParams, PRIOR_FILTERS};
use crate::autograd::{softplus, Graph, Var};
use crate::bitstream::cdf::{gaussian_table, CdfTable, MAX_HALF_RANGE};
use crate::bitstream::CoderError;
use crate::tensor::Tensor;

pub const SCALE_LOWER_BOUND: f64 = 0.11;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Tail mass left to the escape entry of a prior table.
const PRIOR_TAIL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Noise,
    /// Straight-through rounding.
    Round,
    /// Straight-through `round(y - mu) + mu`; the test-time mode.
    MeanRound,
    /// Noise for the rate term, mean rounding for the decoder input.
    Mixed,
}

impl QuantMode {
    /// Mode used for the hyper-latent, which has no mean.
    pub fn hyper(self) -> Self {
        match self {
            Self::Noise => Self::Noise,
            _ => Self::Round,
        }
    }
}

/// Round half away from zero (what `f64::round` does).
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

pub fn quantize(
    g: &mut Graph,
    x: Var,
    mean: Option<Var>,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Var {
    match mode {
        QuantMode::Noise => {
            let noise = Tensor::from_fn(g.shape(x), |_| rng.random::<f64>() - 0.5);
            let n = g.constant(noise);
            g.add(x, n)
        }
        QuantMode::Round => {
            let r = g.value(x).map(round_half_away);
            g.straight_through(x, r)
        }
        QuantMode::MeanRound | QuantMode::Mixed => match mean {
            Some(mu) => {
                let r = g
                    .value(x)
                    .zip_map(g.value(mu), |v, m| round_half_away(v - m) + m);
                g.straight_through(x, r)
            }
            None => quantize(g, x, None, QuantMode::Round, rng),
        },
    }
}

/// `(rate input, decoder input)` for a latent with predicted means.
pub fn quantize_pair(
    g: &mut Graph,
    y: Var,
    means: Var,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> (Var, Var) {
    match mode {
        QuantMode::Mixed => {
            let noisy = quantize(g, y, None, QuantMode::Noise, rng);
            let rounded = quantize(g, y, Some(means), QuantMode::MeanRound, rng);
            (noisy, rounded)
        }
        _ => {
            let q = quantize(g, y, Some(means), mode, rng);
            (q, q)
        }
    }
}

/// Probability mass of the unit bin around `y_hat` under `N(mu, sigma)`,
/// floored.
pub fn gaussian_likelihood(g: &mut Graph, y_hat: Var, means: Var, scales: Var) -> Var {
    let d = g.sub(y_hat, means);
    let v = g.abs(d);
    let nv = g.neg(v);
    let a = g.add_scalar(nv, 0.5);
    let a = g.div(a, scales);
    let b = g.add_scalar(nv, -0.5);
    let b = g.div(b, scales);
    let upper = g.normal_cdf(a);
    let lower = g.normal_cdf(b);
    let lik = g.sub(upper, lower);
    g.lower_bound(lik, LIKELIHOOD_FLOOR)
}

/// Total information `-sum log2(lik)` in bits.
pub fn bits(g: &mut Graph, lik: Var) -> Var {
    let l = g.ln(lik);
    let s = g.sum_all(l);
    g.mul_scalar(s, -1.0 / std::f64::consts::LN_2)
}

/// Cumulative logits of the per-channel prior for inputs `(Nz, 1, B)`.
fn prior_logits(g: &mut Graph, p: &Bound, x: Var) -> Var {
    let mut l = x;
    for i in 0..PRIOR_FILTERS.len() - 1 {
        let m = get(p, &format!("prior.matrix.{i}"));
        let m = g.softplus(m);
        l = g.bmm(m, l);
        l = g.add(l, get(p, &format!("prior.bias.{i}")));
        if i < PRIOR_FILTERS.len() - 2 {
            let f = g.tanh(get(p, &format!("prior.factor.{i}")));
            let t = g.tanh(l);
            let ft = g.mul(f, t);
            l = g.add(l, ft);
        }
    }
    l
}

/// Likelihood of a hyper-latent `(Nz, h, w)` under the factorized prior.
pub fn prior_likelihood(g: &mut Graph, p: &Bound, z_hat: Var) -> Var {
    let shape = g.shape(z_hat).to_vec();
    let flat = g.reshape(z_hat, &[shape[0], 1, shape[1] * shape[2]]);
    let lo_in = g.add_scalar(flat, -0.5);
    let hi_in = g.add_scalar(flat, 0.5);
    let lower = prior_logits(g, p, lo_in);
    let upper = prior_logits(g, p, hi_in);
    // evaluate in the tail where the sigmoid is most accurate
    let sign = g
        .value(lower)
        .zip_map(g.value(upper), |a, b| if a + b > 0.0 { -1.0 } else { 1.0 });
    let sign = g.constant(sign);
    let su = g.mul(upper, sign);
    let sl = g.mul(lower, sign);
    let su = g.sigmoid(su);
    let sl = g.sigmoid(sl);
    let diff = g.sub(su, sl);
    let lik = g.abs(diff);
    let lik = g.lower_bound(lik, LIKELIHOOD_FLOOR);
    g.reshape(lik, &shape)
}

fn sigmoid(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}

/// Scalar prior of one channel, evaluated without a graph.
pub struct ChannelPrior {
    layers: Vec<(Tensor, Tensor, Option<Tensor>)>,
}

impl ChannelPrior {
    pub fn new(params: &CodecParams, channel: usize) -> Self {
        let stages = PRIOR_FILTERS.len() - 1;
        let layers = (0..stages)
            .map(|i| {
                let (fi, fo) = (PRIOR_FILTERS[i], PRIOR_FILTERS[i + 1]);
                let take = |name: String, n: usize| {
                    let t = &params[&name];
                    Tensor::new(&[n], t.data()[channel * n..(channel + 1) * n].to_vec())
                };
                let m = take(format!("prior.matrix.{i}"), fo * fi).map(softplus);
                let b = take(format!("prior.bias.{i}"), fo);
                let f =
                    (i < stages - 1).then(|| take(format!("prior.factor.{i}"), fo).map(f64::tanh));
                (m, b, f)
            })
            .collect();
        Self { layers }
    }

    pub fn logit(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for (m, b, f) in &self.layers {
            let fo = b.numel();
            let fi = h.len();
            let mut next: Vec<f64> = (0..fo)
                .map(|o| (0..fi).map(|k| m.data()[o * fi + k] * h[k]).sum::<f64>() + b.data()[o])
                .collect();
            if let Some(f) = f {
                next.iter_mut()
                    .zip(f.data())
                    .for_each(|(v, &fv)| *v += fv * v.tanh());
            }
            h = next;
        }
        h[0]
    }

    pub fn pmf(&self, s: i32) -> f64 {
        let lower = self.logit(s as f64 - 0.5);
        let upper = self.logit(s as f64 + 0.5);
        let sign = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(sign * upper) - sigmoid(sign * lower)).abs()
    }

    /// Smallest integer range whose outside mass stays below the tail bound.
    pub fn support(&self) -> (i32, i32) {
        let below = |s: i32| sigmoid(self.logit(s as f64 - 0.5));
        let above = |s: i32| sigmoid(-self.logit(s as f64 + 0.5));
        // largest lo with mass below lo <= tail
        let (mut a, mut b) = (-MAX_HALF_RANGE, 0);
        if below(b) <= PRIOR_TAIL {
            a = b;
        } else {
            while b - a > 1 {
                let mid = a + (b - a) / 2;
                if below(mid) <= PRIOR_TAIL {
                    a = mid;
                } else {
                    b = mid;
                }
            }
        }
        let lo = a;
        let (mut c, mut d) = (lo.max(0), MAX_HALF_RANGE);
        if above(c) <= PRIOR_TAIL {
            d = c;
        } else {
            while d - c > 1 {
                let mid = c + (d - c) / 2;
                if above(mid) <= PRIOR_TAIL {
                    d = mid;
                } else {
                    c = mid;
                }
            }
        }
        (lo, d)
    }

    pub fn table(&self) -> Result<CdfTable, CoderError> {
        let (lo, hi) = self.support();
        let pmf: Vec<f64> = (lo..=hi).map(|s| self.pmf(s)).collect();
        CdfTable::from_pmf(&pmf, lo, true)
    }
}

/// One table per hyper-latent channel.
pub fn prior_tables(params: &CodecParams, channels: usize) -> Result<Vec<CdfTable>, CoderError> {
    (0..channels)
        .map(|c| ChannelPrior::new(params, c).table())
        .collect()
}

/// Gaussian tables for every latent element, shared between equal scales.
/// Returns the distinct tables and each element's table index.
pub fn gaussian_contexts(scales: &Tensor) -> Result<(Vec<CdfTable>, Vec<usize>), CoderError> {
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut tables = Vec::new();
    let mut contexts = Vec::with_capacity(scales.numel());
    for &s in scales.data() {
        let key = s.to_bits();
        let i = match index.get(&key) {
            Some(&i) => i,
            None => {
                tables.push(gaussian_table(s)?);
                index.insert(key, tables.len() - 1);
                tables.len() - 1
            }
        };
        contexts.push(i);
    }
    Ok((tables, contexts))
}

/// Integer residuals `round(y - mu)` that the latent substream carries.
pub fn latent_symbols(y: &Tensor, means: &Tensor) -> Vec<i32> {
    y.data()
        .iter()
        .zip(means.data())
        .map(|(&v, &m)| round_half_away(v - m).clamp(i16::MIN as f64, i16::MAX as f64) as i32)
        .collect()
}

pub fn hyper_symbols(z: &Tensor) -> Vec<i32> {
    z.data()
        .iter()
        .map(|&v| round_half_away(v).clamp(i16::MIN as f64, i16::MAX as f64) as i32)
        .collect()
}

/// Context of every hyper-latent element: its channel.
pub fn hyper_contexts(shape: &[usize]) -> Vec<usize> {
    let per = shape[1] * shape[2];
    (0..shape[0] * per).map(|i| i / per).collect()
}

#[cfg(test)]
mod tests {
    use super::super::{random_params, CodecArch};
    use super::*;
    use crate::autograd::gradcheck::check;
    use crate::autograd::normal_cdf;
    use crate::bitstream::range_coder::{decode_symbols, encode_symbols};
    use rand::SeedableRng;

    fn params() -> CodecParams {
        random_params(
            &CodecArch {
                channels: 2,
                n: 4,
                m: 4,
                nz: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    #[test]
    fn initial_prior_is_logistic_with_scale_ten() {
        let p = ChannelPrior::new(&params(), 1);
        for s in -30..=30 {
            let expect = sigmoid((s as f64 + 0.5) / 10.0) - sigmoid((s as f64 - 0.5) / 10.0);
            assert!((p.pmf(s) - expect).abs() < 1e-12, "{s}");
        }
        let (lo, hi) = p.support();
        assert_eq!(lo, -hi);
        // logistic tail: 10 * ln(1e9) is about 207
        assert!((200..215).contains(&hi), "{hi}");
        let t = p.table().unwrap();
        assert!(t.frequency(t.index_of(0).unwrap()) >= t.frequency(t.index_of(5).unwrap()));
    }

    #[test]
    fn graph_prior_matches_scalar_prior() {
        let mut prm = params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in prm.iter_mut().filter(|(k, _)| k.starts_with("prior.")) {
            let noise = Tensor::uniform(t.shape(), 0.5, &mut rng);
            t.add_assign(&noise);
        }
        let z = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 - 6.0) * 2.0);
        let mut g = Graph::no_grad();
        let p = super::super::bind_constants(&mut g, &prm);
        let zv = g.constant(z.clone());
        let lik = prior_likelihood(&mut g, &p, zv);
        for c in 0..3 {
            let cp = ChannelPrior::new(&prm, c);
            for k in 0..4 {
                let s = z.data()[c * 4 + k] as i32;
                let expect = cp.pmf(s).max(LIKELIHOOD_FLOOR);
                let got = g.value(lik).data()[c * 4 + k];
                assert!((got - expect).abs() <= 1e-9 * expect, "{got} {expect}");
            }
        }
    }

    #[test]
    fn gaussian_likelihood_matches_formula() {
        let mut g = Graph::no_grad();
        let y = g.constant(Tensor::new(&[3], vec![2.0, -1.0, 40.0]));
        let mu = g.constant(Tensor::new(&[3], vec![1.7, -1.0, 0.0]));
        let s = g.constant(Tensor::new(&[3], vec![0.5, 0.11, 1.0]));
        let lik = gaussian_likelihood(&mut g, y, mu, s);
        let v = g.value(lik).data().to_vec();
        let expect0 = normal_cdf((0.5 - 0.3) / 0.5) - normal_cdf((-0.5 - 0.3) / 0.5);
        assert!((v[0] - expect0).abs() < 1e-12);
        assert!((v[1] - (2.0 * normal_cdf(0.5 / 0.11) - 1.0)).abs() < 1e-12);
        assert_eq!(v[2], LIKELIHOOD_FLOOR);
    }

    #[test]
    fn rate_gradients_wrt_mean_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-2.0..2.0f64).round());
        let mu = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let sigma = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(0.5..3.0));
        let err = check(&[mu, sigma], |g, v| {
            let yv = g.constant(y.clone());
            let lik = gaussian_likelihood(g, yv, v[0], v[1]);
            bits(g, lik)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn prior_gradients() {
        let prm = params();
        let names: Vec<String> = prm
            .keys()
            .filter(|k| k.starts_with("prior."))
            .cloned()
            .collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| prm[n].map(|v| v + 0.1)).collect();
        let z = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 - 5.0).round());
        let err = check(&inputs, |g, v| {
            let p: Bound = names.iter().cloned().zip(v.iter().copied()).collect();
            let zv = g.constant(z.clone());
            let lik = prior_likelihood(g, &p, zv);
            bits(g, lik)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn quantize_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[4], vec![0.5, -0.5, 1.26, -2.7]), true);
        let mu = g.constant(Tensor::new(&[4], vec![0.2, 0.2, 0.2, 0.2]));
        let r = quantize(&mut g, x, None, QuantMode::Round, &mut rng);
        assert_eq!(g.value(r).data(), &[1.0, -1.0, 1.0, -3.0]);
        let m = quantize(&mut g, x, Some(mu), QuantMode::MeanRound, &mut rng);
        let expect: Vec<f64> = [0.3f64, -0.7, 1.06, -2.9]
            .iter()
            .map(|d| d.round() + 0.2)
            .collect();
        assert!(g
            .value(m)
            .data()
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let n = quantize(&mut g, x, None, QuantMode::Noise, &mut rng);
        let d = g.value(n).zip_map(g.value(x), |a, b| a - b);
        assert!(d.data().iter().all(|v| (-0.5..0.5).contains(v)));
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn latent_tables_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scales = Tensor::from_fn(&[4, 5, 5], |i| {
            if i % 3 == 0 {
                0.11
            } else {
                rng.random_range(0.11..8.0)
            }
        });
        let mu = Tensor::randn(&[4, 5, 5], 2.0, &mut rng);
        let noise = Tensor::uniform(&[4, 5, 5], 3.0, &mut rng);
        let y = Tensor::from_fn(&[4, 5, 5], |i| {
            mu.data()[i] + scales.data()[i] * noise.data()[i]
        });
        let (tables, ctx) = gaussian_contexts(&scales).unwrap();
        assert!(tables.len() < 100);
        let sym = latent_symbols(&y, &mu);
        let bytes = encode_symbols(&sym, &tables, &ctx).unwrap();
        assert_eq!(decode_symbols(&bytes, &tables, &ctx).unwrap(), sym);
        assert_eq!(hyper_contexts(&[2, 1, 3]), vec![0, 0, 0, 1, 1, 1]);
    }
}
