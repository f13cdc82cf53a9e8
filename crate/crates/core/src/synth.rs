//! Synthetic multi-domain regression task.
//!
//! Every sample starts from a latent `x ~ N(0, I)`. Domain 0 is the source
//! ("general") domain: the model sees `x` and must predict `teacher(x)`.
//! Target domain `k ≥ 1` has its own orthogonal map `S_k`, applied to the
//! latent before the shared frozen teacher, and its own offset `o_k`:
//!
//! ```text
//! features = x + o_k
//! target   = teacher(S_k·x + o_k) + noise
//! ```
//!
//! `S_k` rotates a few random planes, so each domain asks for a different,
//! low-rank-correctable input-output map: fitting the targets pulls a shared
//! model away from the source map. The offsets make the domain recoverable
//! from the features alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};
use crate::rng::{gaussian_fill, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Total domains including the source domain 0.
    pub num_domains: usize,
    pub dim: usize,
    /// Rotation angle (radians) of each target domain's map `S_k`.
    pub shift_strength: f64,
    /// Number of random orthogonal planes `S_k` rotates; `S_k − I` has rank `2·shift_planes`.
    pub shift_planes: usize,
    /// Per-coordinate standard deviation of the feature offsets `o_k`.
    pub offset_std: f64,
    pub noise_std: f64,
    pub teacher_hidden: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub shift_matrix: Matrix,
    pub offset: Vector,
    pub shift_strength: f64,
}

/// Frozen teacher `y = x + W2·tanh(W1·x + b1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
}

impl Teacher {
    pub fn eval(&self, x: &Vector) -> Result<Vector> {
        let mut pre = self.w1.matvec(x)?;
        pre.add_scaled(1.0, &self.b1)?;
        let mut y = x.clone();
        y.add_scaled(1.0, &self.w2.matvec(&pre.map(f64::tanh))?)?;
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub params: TaskParams,
    pub teacher: Teacher,
    pub domains: Vec<DomainSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vector,
    pub target: Vector,
    pub domain_id: usize,
}

impl Sample {
    /// Index of the expert aligned with this sample's domain, or `None` for the source domain.
    pub fn expert_domain(&self) -> Option<usize> {
        self.domain_id.checked_sub(1)
    }
}

pub fn make_task(params: &TaskParams) -> Result<TaskSpec> {
    if params.num_domains < 2 {
        return Err(Error::invalid("need the source domain plus at least one target domain"));
    }
    if params.dim == 0 || params.teacher_hidden == 0 {
        return Err(Error::invalid("dim and teacher_hidden must be positive"));
    }
    if !(params.shift_strength >= 0.0) || !params.shift_strength.is_finite() {
        return Err(Error::invalid("shift_strength must be finite and non-negative"));
    }
    if params.shift_planes == 0 || 2 * params.shift_planes > params.dim {
        return Err(Error::invalid("shift_planes must be in 1..=dim/2"));
    }
    if !(params.offset_std >= 0.0) || !params.offset_std.is_finite() {
        return Err(Error::invalid("offset_std must be finite and non-negative"));
    }
    if !(params.noise_std >= 0.0) || !params.noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be finite and non-negative"));
    }
    let root = Rng::new(params.seed).derive("task");
    let d = params.dim;
    let hidden = params.teacher_hidden;

    let mut trng = root.derive("teacher");
    let teacher = Teacher {
        w1: gaussian_fill(&mut trng, hidden, d, 1.0 / (d as f64).sqrt())?,
        b1: trng.normal_vector(hidden, 0.5),
        w2: gaussian_fill(&mut trng, d, hidden, 1.0 / (hidden as f64).sqrt())?,
    };

    let s = params.shift_strength;
    let domains = (0..params.num_domains)
        .map(|k| {
            if k == 0 || (s == 0.0 && params.offset_std == 0.0) {
                return Ok(DomainSpec {
                    domain_id: k,
                    shift_matrix: Matrix::identity(d),
                    offset: Vector::zeros(d),
                    shift_strength: if k == 0 { 0.0 } else { s },
                });
            }
            let mut drng = root.derive_index("domain", k as u64);
            let m = plane_rotation(&mut drng, d, params.shift_planes, s)?;
            let offset = if params.offset_std > 0.0 {
                drng.normal_vector(d, params.offset_std)
            } else {
                Vector::zeros(d)
            };
            Ok(DomainSpec {
                domain_id: k,
                shift_matrix: m,
                offset,
                shift_strength: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSpec {
        params: params.clone(),
        teacher,
        domains,
    })
}

/// Orthogonal map rotating `planes` random mutually orthogonal planes by `angle`.
fn plane_rotation(rng: &mut Rng, d: usize, planes: usize, angle: f64) -> Result<Matrix> {
    // Gram-Schmidt on Gaussian draws gives an orthonormal frame u_1, v_1, ..., u_p, v_p.
    let mut basis: Vec<Vector> = Vec::with_capacity(2 * planes);
    while basis.len() < 2 * planes {
        let mut w = rng.normal_vector(d, 1.0);
        for b in &basis {
            let c = w.dot(b);
            w.add_scaled(-c, b)?;
        }
        let norm = w.dot(&w).sqrt();
        if norm > 1e-6 {
            basis.push(w.scaled(1.0 / norm));
        }
    }
    let (c, s) = (angle.cos(), angle.sin());
    let mut m = Matrix::identity(d);
    for pair in basis.chunks(2) {
        let (u, v) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                let plane = u[i] * u[j] + v[i] * v[j];
                let turn = v[i] * u[j] - u[i] * v[j];
                m.set(i, j, m.get(i, j) + (c - 1.0) * plane + s * turn);
            }
        }
    }
    Ok(m)
}

impl TaskSpec {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_target_domains(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Clean (noise-free) features and target for latent input `x` in `domain`.
    pub fn realize(&self, domain: usize, x: &Vector) -> Result<(Vector, Vector)> {
        let spec = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::invalid(format!("domain {domain} out of range")))?;
        let mut features = x.clone();
        features.add_scaled(1.0, &spec.offset)?;
        let mut moved = spec.shift_matrix.matvec(x)?;
        moved.add_scaled(1.0, &spec.offset)?;
        let target = self.teacher.eval(&moved)?;
        Ok((features, target))
    }

    pub fn sample(&self, domain: usize, rng: &mut Rng) -> Result<Sample> {
        let x = rng.normal_vector(self.dim(), 1.0);
        let (features, mut target) = self.realize(domain, &x)?;
        if self.params.noise_std > 0.0 {
            target.add_scaled(1.0, &rng.normal_vector(self.dim(), self.params.noise_std))?;
        }
        Ok(Sample {
            features,
            target,
            domain_id: domain,
        })
    }

    /// `n` i.i.d. samples; each draws its domain from `domain_mix`.
    pub fn sample_batch(&self, domain_mix: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
        validate_mix(domain_mix, self.num_domains())?;
        (0..n)
            .map(|_| {
                let domain = draw_categorical(domain_mix, rng);
                self.sample(domain, rng)
            })
            .collect()
    }

    /// Seed-only export; [`TaskSpec::from_seed_file`] regenerates identical data.
    pub fn to_seed_file(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TaskFile {
            format: "hdmole-task".into(),
            version: 1,
            params: self.params.clone(),
        })?)
    }

    pub fn from_seed_file(s: &str) -> Result<TaskSpec> {
        let file: TaskFile = serde_json::from_str(s)?;
        if file.format != "hdmole-task" || file.version != 1 {
            return Err(Error::invalid("unsupported task file"));
        }
        make_task(&file.params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    format: String,
    version: u32,
    params: TaskParams,
}

fn validate_mix(mix: &[f64], num_domains: usize) -> Result<()> {
    if mix.len() != num_domains {
        return Err(Error::invalid(format!(
            "domain mix has {} entries, task has {num_domains} domains",
            mix.len()
        )));
    }
    if mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("domain mix entries must be finite and non-negative"));
    }
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

fn draw_categorical(mix: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in mix.iter().enumerate() {
        if *p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Uniform mix over the target domains `1..num_domains`.
pub fn target_mix(num_domains: usize) -> Vec<f64> {
    let m = (num_domains - 1) as f64;
    (0..num_domains).map(|k| if k == 0 { 0.0 } else { 1.0 / m }).collect()
}

/// All mass on one domain.
pub fn one_hot_mix(num_domains: usize, domain: usize) -> Vec<f64> {
    (0..num_domains).map(|k| if k == domain { 1.0 } else { 0.0 }).collect()
}
