//! Question/sentence similarity functions and the per-type projection bank.
//!
//! * `Dot`: `s . q`
//! * `Cosine`: `s . q / (|s| |q|)`
//! * `Bilinear`: `s^T W_k q`
//! * `ProjectedCosine`: `cos(W^S_k s, W^Q_k q)` with `W^S_k, W^Q_k` of shape `r x d`
//!
//! In training mode both projected vectors are multiplied by an
//! inverted-dropout mask before the cosine. The mask is returned with the
//! forward value so the backward pass replays exactly the same one.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Norms below this floor are reported instead of clamped.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityKind {
    Dot,
    Cosine,
    Bilinear,
    ProjectedCosine { rank: usize },
}

impl SimilarityKind {
    pub fn is_cosine_family(self) -> bool {
        matches!(
            self,
            SimilarityKind::Cosine | SimilarityKind::ProjectedCosine { .. }
        )
    }

    pub fn has_projections(self) -> bool {
        matches!(
            self,
            SimilarityKind::Bilinear | SimilarityKind::ProjectedCosine { .. }
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::ProjectedCosine { .. } => "projected-cosine",
        }
    }
}

/// Candidate ranks `d x {1, 1/2, 1/4, 1/8}` for the projection search.
pub fn default_rank_grid(d: usize) -> Vec<usize> {
    [1, 2, 4, 8]
        .iter()
        .map(|f| d / f)
        .filter(|&r| r >= 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// `d x d`.
    Bilinear(Array2<f64>),
    /// Sentence and question maps, each `r x d`.
    Projected { ws: Array2<f64>, wq: Array2<f64> },
}

impl Projection {
    fn zeros_like(&self) -> Self {
        match self {
            Projection::Bilinear(w) => Projection::Bilinear(Array2::zeros(w.raw_dim())),
            Projection::Projected { ws, wq } => Projection::Projected {
                ws: Array2::zeros(ws.raw_dim()),
                wq: Array2::zeros(wq.raw_dim()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBank {
    pub kind: SimilarityKind,
    /// One entry per question type, or a single entry when `shared`.
    pub projections: Vec<Projection>,
    pub shared: bool,
    pub temperatures: Vec<f64>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub kind: SimilarityKind,
    pub num_types: usize,
    pub d: usize,
    pub temperatures: Vec<f64>,
    pub dropout: f64,
    /// One projection reused for every question type.
    #[serde(default)]
    pub shared: bool,
    pub seed: u64,
}

pub fn init_bank(cfg: &BankConfig) -> Result<ProjectionBank> {
    let BankConfig {
        kind, num_types, d, ..
    } = *cfg;
    if num_types == 0 {
        return Err(Error::Config(
            "bank needs at least one question type".into(),
        ));
    }
    if cfg.temperatures.len() != num_types {
        return Err(Error::Config(format!(
            "{} temperatures given for {num_types} question types",
            cfg.temperatures.len()
        )));
    }
    if let Some(t) = cfg
        .temperatures
        .iter()
        .find(|t| !(**t > 0.0 && t.is_finite()))
    {
        return Err(Error::Config(format!("temperature {t} must be positive")));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config(format!(
            "dropout {} outside [0, 1)",
            cfg.dropout
        )));
    }
    if let SimilarityKind::ProjectedCosine { rank } = kind {
        if rank == 0 || rank > d {
            return Err(Error::Config(format!(
                "projection rank {rank} must be in 1..={d}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };
    let entries = if cfg.shared { 1 } else { num_types };
    let projections = match kind {
        SimilarityKind::Dot | SimilarityKind::Cosine => Vec::new(),
        SimilarityKind::Bilinear => (0..entries)
            .map(|_| Projection::Bilinear(draw(d, d)))
            .collect(),
        SimilarityKind::ProjectedCosine { rank } => (0..entries)
            .map(|_| Projection::Projected {
                ws: draw(rank, d),
                wq: draw(rank, d),
            })
            .collect(),
    };
    Ok(ProjectionBank {
        kind,
        projections,
        shared: cfg.shared,
        temperatures: cfg.temperatures.clone(),
        dropout: cfg.dropout,
    })
}

impl ProjectionBank {
    pub fn num_types(&self) -> usize {
        self.temperatures.len()
    }

    pub fn temperature(&self, k: usize) -> f64 {
        self.temperatures[k]
    }

    /// Projection used for question type `k`.
    pub fn projection(&self, k: usize) -> Option<&Projection> {
        let idx = if self.shared { 0 } else { k };
        self.projections.get(idx)
    }

    fn projection_index(&self, k: usize) -> usize {
        if self.shared {
            0
        } else {
            k
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            projections: self
                .projections
                .iter()
                .map(Projection::zeros_like)
                .collect(),
            shared: self.shared,
            temperatures: self.temperatures.clone(),
            dropout: self.dropout,
        }
    }

    /// Maps `s` and `q` into type `k`'s space without dropout. Raw vectors
    /// are returned for `Dot`/`Cosine`; `Bilinear` returns `(s, W_k q)`.
    pub fn project(
        &self,
        s: ArrayView1<f64>,
        q: ArrayView1<f64>,
        k: usize,
    ) -> (Array1<f64>, Array1<f64>) {
        match self.projection(k) {
            Some(Projection::Projected { ws, wq }) => (ws.dot(&s), wq.dot(&q)),
            Some(Projection::Bilinear(w)) => (s.to_owned(), w.dot(&q)),
            None => (s.to_owned(), q.to_owned()),
        }
    }
}

impl ParamSet for ProjectionBank {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.projections.iter().enumerate() {
            match p {
                Projection::Bilinear(w) => out.push((format!("type{i}.w"), w.view().into_dyn())),
                Projection::Projected { ws, wq } => {
                    out.push((format!("type{i}.ws"), ws.view().into_dyn()));
                    out.push((format!("type{i}.wq"), wq.view().into_dyn()));
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.projections.iter_mut().enumerate() {
            match p {
                Projection::Bilinear(w) => {
                    out.push((format!("type{i}.w"), w.view_mut().into_dyn()))
                }
                Projection::Projected { ws, wq } => {
                    out.push((format!("type{i}.ws"), ws.view_mut().into_dyn()));
                    out.push((format!("type{i}.wq"), wq.view_mut().into_dyn()));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout state for one training example. The first projected-cosine call
/// for a projection draws its mask and every later call in the same context
/// reuses it, so the question and all sentences scored under one projection
/// see the same dropped units. Evaluation mode never touches the generator.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub mode: Mode,
    rng: Option<ChaCha8Rng>,
    masks: BTreeMap<usize, Array1<f64>>,
}

impl SimContext {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
            masks: BTreeMap::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            masks: BTreeMap::new(),
        }
    }

    /// Inverted-dropout mask for projection slot `slot`. A draw that drops
    /// every unit is rejected and redrawn.
    fn mask(&mut self, slot: usize, len: usize, p: f64) -> Option<Array1<f64>> {
        let (Mode::Train, Some(rng)) = (self.mode, self.rng.as_mut()) else {
            return None;
        };
        if p <= 0.0 {
            return None;
        }
        let mask = self.masks.entry(slot).or_insert_with(|| {
            let keep = 1.0 / (1.0 - p);
            loop {
                let m = Array1::from_shape_simple_fn(len, || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                if m.iter().any(|&x| x != 0.0) {
                    break m;
                }
            }
        });
        Some(mask.clone())
    }
}

/// Forward value plus what the backward pass must replay.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub value: f64,
    pub kind: SimilarityKind,
    pub qtype: usize,
    /// Dropout mask applied to both projected vectors.
    pub mask: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimGrad {
    pub ds: Array1<f64>,
    pub dq: Array1<f64>,
    /// Gradient for the projection used (absent for `Dot`/`Cosine`).
    pub dproj: Option<Projection>,
}

fn norm(v: ArrayView1<f64>) -> Result<f64> {
    let n = v.dot(&v).sqrt();
    if n.is_finite() && n >= NORM_FLOOR {
        Ok(n)
    } else {
        Err(Error::DegenerateVector {
            norm: n,
            floor: NORM_FLOOR,
        })
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    Ok(a.dot(&b) / (norm(a)? * norm(b)?))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grad(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    upstream: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (na, nb) = (norm(a)?, norm(b)?);
    let c = a.dot(&b) / (na * nb);
    let da = (&b / (na * nb) - &a * (c / (na * na))) * upstream;
    let db = (&a / (na * nb) - &b * (c / (nb * nb))) * upstream;
    Ok((da, db))
}

fn check_inputs(
    kind: SimilarityKind,
    s: ArrayView1<f64>,
    q: ArrayView1<f64>,
    k: usize,
    bank: &ProjectionBank,
) -> Result<()> {
    if s.len() != q.len() {
        return Err(Error::Shape(format!(
            "sentence dim {} != question dim {}",
            s.len(),
            q.len()
        )));
    }
    if s.iter().chain(q.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "similarity input".into(),
        });
    }
    if kind.has_projections() {
        if k >= bank.num_types() {
            return Err(Error::Shape(format!(
                "question type {k} outside bank of {}",
                bank.num_types()
            )));
        }
        let ok = match (kind, bank.projection(k)) {
            (SimilarityKind::Bilinear, Some(Projection::Bilinear(w))) => {
                w.dim() == (s.len(), s.len())
            }
            (SimilarityKind::ProjectedCosine { rank }, Some(Projection::Projected { ws, wq })) => {
                ws.dim() == (rank, s.len()) && wq.dim() == (rank, s.len())
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "bank does not hold {} projections of dim {}",
                kind.name(),
                s.len()
            )));
        }
    }
    Ok(())
}

pub fn similarity(
    kind: SimilarityKind,
    s: ArrayView1<f64>,
    q: ArrayView1<f64>,
    k: usize,
    bank: &ProjectionBank,
    ctx: &mut SimContext,
) -> Result<SimOutput> {
    check_inputs(kind, s, q, k, bank)?;
    let mut mask = None;
    let value = match kind {
        SimilarityKind::Dot => s.dot(&q),
        SimilarityKind::Cosine => cosine(s, q)?,
        SimilarityKind::Bilinear => {
            let Some(Projection::Bilinear(w)) = bank.projection(k) else {
                unreachable!()
            };
            s.dot(&w.dot(&q))
        }
        SimilarityKind::ProjectedCosine { rank } => {
            let Some(Projection::Projected { ws, wq }) = bank.projection(k) else {
                unreachable!()
            };
            let mut sk = ws.dot(&s);
            let mut qk = wq.dot(&q);
            mask = ctx.mask(bank.projection_index(k), rank, bank.dropout);
            if let Some(m) = &mask {
                sk *= m;
                qk *= m;
            }
            cosine(sk.view(), qk.view())?
        }
    };
    Ok(SimOutput {
        value,
        kind,
        qtype: k,
        mask,
    })
}

pub fn similarity_backward(
    kind: SimilarityKind,
    s: ArrayView1<f64>,
    q: ArrayView1<f64>,
    k: usize,
    bank: &ProjectionBank,
    forward: &SimOutput,
    upstream: f64,
) -> Result<SimGrad> {
    check_inputs(kind, s, q, k, bank)?;
    if forward.kind != kind || forward.qtype != k {
        return Err(Error::Replay(format!(
            "forward ran {} for type {}, backward asked for {} type {k}",
            forward.kind.name(),
            forward.qtype,
            kind.name()
        )));
    }
    match kind {
        SimilarityKind::Dot | SimilarityKind::Cosine | SimilarityKind::Bilinear
            if forward.mask.is_some() =>
        {
            return Err(Error::Replay(format!(
                "{} never draws dropout masks",
                kind.name()
            )));
        }
        _ => {}
    }
    match kind {
        SimilarityKind::Dot => Ok(SimGrad {
            ds: &q * upstream,
            dq: &s * upstream,
            dproj: None,
        }),
        SimilarityKind::Cosine => {
            let (ds, dq) = cosine_grad(s, q, upstream)?;
            Ok(SimGrad {
                ds,
                dq,
                dproj: None,
            })
        }
        SimilarityKind::Bilinear => {
            let Some(Projection::Bilinear(w)) = bank.projection(k) else {
                unreachable!()
            };
            let ds = w.dot(&q) * upstream;
            let dq = w.t().dot(&s) * upstream;
            let dw = outer(s, q) * upstream;
            Ok(SimGrad {
                ds,
                dq,
                dproj: Some(Projection::Bilinear(dw)),
            })
        }
        SimilarityKind::ProjectedCosine { rank } => {
            let Some(Projection::Projected { ws, wq }) = bank.projection(k) else {
                unreachable!()
            };
            let mut sk = ws.dot(&s);
            let mut qk = wq.dot(&q);
            if let Some(m) = &forward.mask {
                if m.len() != rank {
                    return Err(Error::Replay(format!(
                        "mask length {} for rank {rank}",
                        m.len()
                    )));
                }
                sk *= m;
                qk *= m;
            }
            let (mut dsk, mut dqk) = cosine_grad(sk.view(), qk.view(), upstream)?;
            if let Some(m) = &forward.mask {
                dsk *= m;
                dqk *= m;
            }
            Ok(SimGrad {
                ds: ws.t().dot(&dsk),
                dq: wq.t().dot(&dqk),
                dproj: Some(Projection::Projected {
                    ws: outer(dsk.view(), s),
                    wq: outer(dqk.view(), q),
                }),
            })
        }
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Adds a projection gradient into the matching slot of a gradient bank.
pub(crate) fn accumulate_projection(
    into: &mut ProjectionBank,
    k: usize,
    grad: &Projection,
    scale: f64,
) {
    let idx = into.projection_index(k);
    match (&mut into.projections[idx], grad) {
        (Projection::Bilinear(w), Projection::Bilinear(g)) => w.scaled_add(scale, g),
        (Projection::Projected { ws, wq }, Projection::Projected { ws: gs, wq: gq }) => {
            ws.scaled_add(scale, gs);
            wq.scaled_add(scale, gq);
        }
        _ => unreachable!("gradient bank built with zeros_like"),
    }
}
