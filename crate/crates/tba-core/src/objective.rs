//! Loss terms, the combined objective, the augmented Lagrangian and its
//! analytic gradients with respect to the relaxed bit variables.
//!
//! An [`AttackContext`] freezes everything that never changes during one
//! attack: the victim model, the goal sample(s), the auxiliary set and their
//! extracted features. The optimization variables are two relaxed bit
//! tensors: `bhat` drives the flipped (malicious) model, `b` the released
//! (benign) one. Logits are linear in the relaxed bits, so every gradient
//! here is exact, not approximated.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_lowest, Dataset, VictimModel};
use crate::quant::{BitTensor, RelaxedTensor};

/// One misclassification goal: drive `input` from `source` to `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackGoal {
    pub input: Array1<f64>,
    pub source: usize,
    pub target: usize,
}

impl AttackGoal {
    pub fn new(input: Array1<f64>, source: usize, target: usize) -> Result<Self> {
        if source == target {
            return Err(Error::Config(format!(
                "goal source and target must differ, both are {source}"
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("goal input contains non-finite values".into()));
        }
        Ok(Self {
            input,
            source,
            target,
        })
    }
}

/// Whether the attack optimizes the two goal-class rows or the full layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Single,
    Multi,
}

/// Everything that defines one attack instance apart from the victim.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    goals: Vec<AttackGoal>,
    mode: AttackMode,
    aux: Dataset,
    lambda1: f64,
    lambda2: f64,
    margin: f64,
}

impl AttackSpec {
    /// Single-target attack: the variables are the source and target rows.
    pub fn single(
        goal: AttackGoal,
        aux: Dataset,
        lambda1: f64,
        lambda2: f64,
        margin: f64,
    ) -> Result<Self> {
        Self::build(vec![goal], AttackMode::Single, aux, lambda1, lambda2, margin)
    }

    /// Multi-target attack: the variables are the whole final layer.
    pub fn multi(
        goals: Vec<AttackGoal>,
        aux: Dataset,
        lambda1: f64,
        lambda2: f64,
        margin: f64,
    ) -> Result<Self> {
        Self::build(goals, AttackMode::Multi, aux, lambda1, lambda2, margin)
    }

    fn build(
        goals: Vec<AttackGoal>,
        mode: AttackMode,
        aux: Dataset,
        lambda1: f64,
        lambda2: f64,
        margin: f64,
    ) -> Result<Self> {
        if goals.is_empty() {
            return Err(Error::Config("attack needs at least one goal".into()));
        }
        if mode == AttackMode::Single && goals.len() != 1 {
            return Err(Error::Config(format!(
                "single-target mode takes exactly one goal, got {}",
                goals.len()
            )));
        }
        for (i, a) in goals.iter().enumerate() {
            for b in goals.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Config("duplicate goal triple".into()));
                }
            }
        }
        for &(name, v) in &[("lambda1", lambda1), ("lambda2", lambda2), ("margin", margin)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            goals,
            mode,
            aux,
            lambda1,
            lambda2,
            margin,
        })
    }

    pub fn goals(&self) -> &[AttackGoal] {
        &self.goals
    }

    pub fn mode(&self) -> AttackMode {
        self.mode
    }

    pub fn aux(&self) -> &Dataset {
        &self.aux
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// Which rows of the final layer are optimization variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableScope {
    /// Rows of the source and target class; variable row 0 is the source
    /// row, variable row 1 the target row.
    Pair { source: usize, target: usize },
    /// Every row of the layer; variable row r is class r.
    Full { classes: usize },
}

impl VariableScope {
    /// Number of variable rows.
    pub fn var_rows(&self) -> usize {
        match *self {
            VariableScope::Pair { .. } => 2,
            VariableScope::Full { classes } => classes,
        }
    }

    /// Class index backing a variable row.
    pub fn class_of(&self, var_row: usize) -> usize {
        match *self {
            VariableScope::Pair { source, target } => match var_row {
                0 => source,
                1 => target,
                _ => panic!("pair scope has two rows"),
            },
            VariableScope::Full { classes } => {
                assert!(var_row < classes);
                var_row
            }
        }
    }

    /// Variable row backing a class, if the class is in scope.
    pub fn var_row_of(&self, class: usize) -> Option<usize> {
        match *self {
            VariableScope::Pair { source, target } => {
                if class == source {
                    Some(0)
                } else if class == target {
                    Some(1)
                } else {
                    None
                }
            }
            VariableScope::Full { classes } => (class < classes).then_some(class),
        }
    }
}

/// Which of the goal classes a hinge favors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FavoredClass {
    Source,
    Target,
}

/// The competing margin `m = max over classes outside {source, target} of
/// the logit, plus `margin`. Negative infinity when no such class exists.
pub fn margin_from_logits(logits: &[f64], source: usize, target: usize, margin: f64) -> f64 {
    let best = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != source && i != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    best + margin
}

/// Index attaining the maximum inside `margin_from_logits`, lowest index on
/// ties; `None` when only the two goal classes exist.
pub fn margin_argmax(logits: &[f64], source: usize, target: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if i == source || i == target {
            continue;
        }
        match best {
            Some(j) if logits[j] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Two-part hinge on a logit vector. With the target favored this is the
/// malicious loss: `max(m - p_t, 0) + max(p_s - p_t, 0)`; with the source
/// favored the roles of the two goal classes swap.
pub fn hinge_from_logits(
    logits: &[f64],
    source: usize,
    target: usize,
    margin: f64,
    favored: FavoredClass,
) -> f64 {
    let (fav, other) = match favored {
        FavoredClass::Target => (target, source),
        FavoredClass::Source => (source, target),
    };
    let m = margin_from_logits(logits, source, target, margin);
    let p_fav = logits[fav];
    let p_other = logits[other];
    (m - p_fav).max(0.0) + (p_other - p_fav).max(0.0)
}

/// The four loss terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_b: f64,
    pub loss_m: f64,
    pub loss_i: f64,
    pub loss_d: f64,
    pub total: f64,
}

/// Borrowed view of the full ADMM state for evaluating the augmented
/// Lagrangian. Residuals pair `bhat` with `u[0]`, `u[1]` and `b` with
/// `u[2]`, `u[3]`; `z` and `rho` follow the same order.
#[derive(Clone, Copy)]
pub struct AdmmView<'a> {
    pub b: &'a RelaxedTensor,
    pub bhat: &'a RelaxedTensor,
    pub u: [&'a RelaxedTensor; 4],
    pub z: [&'a RelaxedTensor; 4],
    pub rho: [f64; 4],
}

/// Squared Euclidean distance between two equal-shape relaxed tensors. On
/// binary tensors this equals the Hamming distance.
pub fn loss_d(b: &RelaxedTensor, bhat: &RelaxedTensor) -> f64 {
    assert_eq!(b.shape(), bhat.shape(), "loss_d shape mismatch");
    b.as_slice()
        .iter()
        .zip(bhat.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Frozen per-attack state: model, goals, cached features, variable scope.
pub struct AttackContext<'a> {
    model: &'a VictimModel,
    spec: &'a AttackSpec,
    scope: VariableScope,
    aux_features: Array2<f64>,
    aux_frozen: Array2<f64>,
    goal_features: Vec<Array1<f64>>,
    goal_frozen: Vec<Array1<f64>>,
}

impl<'a> AttackContext<'a> {
    /// Validates the spec against the model and caches every forward pass
    /// through the frozen extractor.
    pub fn new(model: &'a VictimModel, spec: &'a AttackSpec) -> Result<Self> {
        let classes = model.arch().classes;
        let input_dim = model.arch().input_dim;
        for goal in spec.goals() {
            if goal.source >= classes || goal.target >= classes {
                return Err(Error::Config(format!(
                    "goal classes ({}, {}) out of range for {classes} classes",
                    goal.source, goal.target
                )));
            }
            if goal.input.len() != input_dim {
                return Err(Error::Shape(format!(
                    "goal input has {} entries, model expects {input_dim}",
                    goal.input.len()
                )));
            }
        }
        if spec.aux().dim() != input_dim {
            return Err(Error::Shape(format!(
                "aux dim {} does not match model input dim {input_dim}",
                spec.aux().dim()
            )));
        }
        if spec.aux().classes() > classes {
            return Err(Error::Dataset(format!(
                "aux labels use {} classes, model has {classes}",
                spec.aux().classes()
            )));
        }

        let scope = match spec.mode() {
            AttackMode::Single => {
                let goal = &spec.goals()[0];
                VariableScope::Pair {
                    source: goal.source,
                    target: goal.target,
                }
            }
            AttackMode::Multi => VariableScope::Full { classes },
        };

        let aux_features = match spec.aux().features() {
            Some(f) if f.ncols() == model.arch().feature_dim => f.to_owned(),
            _ => model.extract_features(spec.aux().inputs())?,
        };
        let aux_frozen = aux_features.dot(&model.fc_weights().t());

        let mut goal_features = Vec::with_capacity(spec.goals().len());
        let mut goal_frozen = Vec::with_capacity(spec.goals().len());
        for goal in spec.goals() {
            let f = model.feature_vector(goal.input.view())?;
            goal_frozen.push(model.logits_from_features(f.view()));
            goal_features.push(f);
        }

        Ok(Self {
            model,
            spec,
            scope,
            aux_features,
            aux_frozen,
            goal_features,
            goal_frozen,
        })
    }

    pub fn model(&self) -> &VictimModel {
        self.model
    }

    pub fn spec(&self) -> &AttackSpec {
        self.spec
    }

    pub fn scope(&self) -> VariableScope {
        self.scope
    }

    /// Shape of the variable tensors: `(rows, features, word_bits)`.
    pub fn var_shape(&self) -> (usize, usize, usize) {
        (
            self.scope.var_rows(),
            self.model.arch().feature_dim,
            self.model.fc_quant().q_bits(),
        )
    }

    /// Total number of scalar variables per tensor.
    pub fn var_count(&self) -> usize {
        let (r, v, q) = self.var_shape();
        r * v * q
    }

    /// The victim's bits restricted to the variable rows.
    pub fn initial_bits(&self) -> BitTensor {
        let rows: Vec<usize> = (0..self.scope.var_rows())
            .map(|r| self.scope.class_of(r))
            .collect();
        self.model.fc_bits().select_rows(&rows)
    }

    /// Writes variable-scope bits back into a full copy of the victim's
    /// final layer.
    pub fn scope_to_full(&self, scope_bits: &BitTensor) -> BitTensor {
        assert_eq!(scope_bits.shape(), self.var_shape(), "scope shape mismatch");
        let mut full = self.model.fc_bits().clone();
        for r in 0..self.scope.var_rows() {
            full.copy_row_from(self.scope.class_of(r), scope_bits, r);
        }
        full
    }

    fn assert_var_shape(&self, t: &RelaxedTensor) {
        assert_eq!(t.shape(), self.var_shape(), "variable tensor shape mismatch");
    }

    /// Decodes relaxed variables into a real weight matrix, one row per
    /// variable row. Purely linear in the variables.
    fn decode_vars(&self, vars: &RelaxedTensor) -> Array2<f64> {
        self.assert_var_shape(vars);
        let (rows, feats, q) = self.var_shape();
        let cfg = self.model.fc_quant();
        let mut w = Array2::zeros((rows, feats));
        for r in 0..rows {
            for j in 0..feats {
                let word = vars.word(r, j);
                let mut acc = 0.0;
                for (p, &v) in word.iter().enumerate().take(q) {
                    acc += v * cfg.bit_weight(p);
                }
                w[[r, j]] = acc;
            }
        }
        w
    }

    /// Expands a weight-space gradient into bit space: each bit inherits
    /// its word's gradient scaled by the bit coefficient.
    fn expand_dw(&self, dw: &Array2<f64>) -> RelaxedTensor {
        let (rows, feats, q) = self.var_shape();
        let cfg = self.model.fc_quant();
        let mut out = RelaxedTensor::zeros(rows, feats, q);
        let slice = out.as_mut_slice();
        let mut at = 0;
        for r in 0..rows {
            for j in 0..feats {
                let g = dw[[r, j]];
                for p in 0..q {
                    slice[at] = g * cfg.bit_weight(p);
                    at += 1;
                }
            }
        }
        out
    }

    /// Full logit vector for one goal under a variable weight matrix:
    /// frozen rows for out-of-scope classes, composed rows for the rest.
    fn compose_goal(&self, w: &Array2<f64>, g: usize) -> Array1<f64> {
        let mut out = self.goal_frozen[g].clone();
        for r in 0..self.scope.var_rows() {
            out[self.scope.class_of(r)] = w.row(r).dot(&self.goal_features[g]);
        }
        out
    }

    /// Relaxed logits of goal `g` under `vars`.
    pub fn goal_logits(&self, vars: &RelaxedTensor, g: usize) -> Array1<f64> {
        self.compose_goal(&self.decode_vars(vars), g)
    }

    /// Binary logits of goal `g` under scope bits.
    pub fn goal_logits_bits(&self, bits: &BitTensor, g: usize) -> Array1<f64> {
        assert_eq!(bits.shape(), self.var_shape(), "scope shape mismatch");
        let cfg = self.model.fc_quant();
        let mut out = self.goal_frozen[g].clone();
        for r in 0..self.scope.var_rows() {
            let mut acc = 0.0;
            for j in 0..bits.features() {
                acc += bits.code(r, j) as f64 * cfg.step_size() * self.goal_features[g][j];
            }
            out[self.scope.class_of(r)] = acc;
        }
        out
    }

    /// The competing margin m for goal `g` under relaxed variables.
    pub fn margin_for_goal(&self, vars: &RelaxedTensor, g: usize) -> f64 {
        let goal = &self.spec.goals()[g];
        let logits = self.goal_logits(vars, g);
        margin_from_logits(
            logits.as_slice().unwrap(),
            goal.source,
            goal.target,
            self.spec.margin(),
        )
    }

    /// True when binarized candidate bits satisfy every goal: the flipped
    /// bits classify each goal input as its target and the released bits
    /// as its source.
    pub fn candidate_valid(&self, released: &BitTensor, flipped: &BitTensor) -> bool {
        for (g, goal) in self.spec.goals().iter().enumerate() {
            let hit = self.goal_logits_bits(flipped, g);
            if argmax_lowest(hit.as_slice().unwrap()) != goal.target {
                return false;
            }
            let keep = self.goal_logits_bits(released, g);
            if argmax_lowest(keep.as_slice().unwrap()) != goal.source {
                return false;
            }
        }
        true
    }

    /// Aux logits (one row per sample) under a variable weight matrix.
    fn compose_aux(&self, w: &Array2<f64>) -> Array2<f64> {
        let mut out = self.aux_frozen.clone();
        let var_logits = self.aux_features.dot(&w.t());
        for r in 0..self.scope.var_rows() {
            let class = self.scope.class_of(r);
            for i in 0..out.nrows() {
                out[[i, class]] = var_logits[[i, r]];
            }
        }
        out
    }

    /// Mean cross-entropy over the aux set and its weight-space gradient.
    fn ce_terms(&self, w: &Array2<f64>) -> (f64, Array2<f64>) {
        let logits = self.compose_aux(w);
        let n = logits.nrows();
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut dvar = Array2::zeros((n, self.scope.var_rows()));
        for (i, row) in logits.rows().into_iter().enumerate() {
            let y = self.spec.aux().label(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row.iter() {
                z += (v - max).exp();
            }
            loss += (z.ln() + max - row[y]) * scale;
            for r in 0..self.scope.var_rows() {
                let class = self.scope.class_of(r);
                let p = (row[class] - max).exp() / z;
                let indicator = if class == y { 1.0 } else { 0.0 };
                dvar[[i, r]] = (p - indicator) * scale;
            }
        }
        let dw = dvar.t().dot(&self.aux_features);
        (loss, dw)
    }

    /// Summed hinge loss over all goals and its weight-space gradient.
    fn hinge_terms(&self, w: &Array2<f64>, favored: FavoredClass) -> (f64, Array2<f64>) {
        let (rows, feats, _) = self.var_shape();
        let mut loss = 0.0;
        let mut dw = Array2::zeros((rows, feats));
        for (g, goal) in self.spec.goals().iter().enumerate() {
            let logits = self.compose_goal(w, g);
            let slice = logits.as_slice().unwrap();
            let (fav, other) = match favored {
                FavoredClass::Target => (goal.target, goal.source),
                FavoredClass::Source => (goal.source, goal.target),
            };
            let m = margin_from_logits(slice, goal.source, goal.target, self.spec.margin());
            let features = &self.goal_features[g];

            if m - slice[fav] > 0.0 {
                loss += m - slice[fav];
                // m's own logit only moves when its class is a variable row.
                if let Some(j_star) = margin_argmax(slice, goal.source, goal.target) {
                    if let Some(r) = self.scope.var_row_of(j_star) {
                        dw.row_mut(r).scaled_add(1.0, features);
                    }
                }
                if let Some(r) = self.scope.var_row_of(fav) {
                    dw.row_mut(r).scaled_add(-1.0, features);
                }
            }
            if slice[other] - slice[fav] > 0.0 {
                loss += slice[other] - slice[fav];
                if let Some(r) = self.scope.var_row_of(other) {
                    dw.row_mut(r).scaled_add(1.0, features);
                }
                if let Some(r) = self.scope.var_row_of(fav) {
                    dw.row_mut(r).scaled_add(-1.0, features);
                }
            }
        }
        (loss, dw)
    }

    /// Malicious loss: every goal's flipped logits should put the target
    /// class above the margin and above the source.
    pub fn loss_m(&self, bhat: &RelaxedTensor) -> f64 {
        let w = self.decode_vars(bhat);
        self.hinge_terms(&w, FavoredClass::Target).0
    }

    /// Ineffective loss: every goal's released logits should keep the
    /// source class above the margin and above the target.
    pub fn loss_i(&self, b: &RelaxedTensor) -> f64 {
        let w = self.decode_vars(b);
        self.hinge_terms(&w, FavoredClass::Source).0
    }

    /// Benign loss: mean aux cross-entropy under `b` plus the same under
    /// `bhat`.
    pub fn loss_b(&self, b: &RelaxedTensor, bhat: &RelaxedTensor) -> f64 {
        let wb = self.decode_vars(b);
        let wh = self.decode_vars(bhat);
        self.ce_terms(&wb).0 + self.ce_terms(&wh).0
    }

    /// All four loss terms plus their weighted combination.
    pub fn total_objective(&self, b: &RelaxedTensor, bhat: &RelaxedTensor) -> LossBreakdown {
        let loss_b = self.loss_b(b, bhat);
        let loss_m = self.loss_m(bhat);
        let loss_i = self.loss_i(b);
        let ld = loss_d(b, bhat);
        LossBreakdown {
            loss_b,
            loss_m,
            loss_i,
            loss_d: ld,
            total: loss_b + self.spec.lambda1() * (loss_m + loss_i) + self.spec.lambda2() * ld,
        }
    }

    /// The augmented Lagrangian: the combined objective plus dual and
    /// quadratic penalty terms over the four residuals.
    pub fn augmented_lagrangian(&self, view: &AdmmView) -> f64 {
        let mut total = self.total_objective(view.b, view.bhat).total;
        let primals = [view.bhat, view.bhat, view.b, view.b];
        for j in 0..4 {
            let p = primals[j].as_slice();
            let u = view.u[j].as_slice();
            let z = view.z[j].as_slice();
            let mut dot = 0.0;
            let mut sq = 0.0;
            for i in 0..p.len() {
                let r = p[i] - u[i];
                dot += z[i] * r;
                sq += r * r;
            }
            total += dot + 0.5 * view.rho[j] * sq;
        }
        total
    }

    fn grad_common(
        &self,
        own: &RelaxedTensor,
        other: &RelaxedTensor,
        favored: FavoredClass,
        u: [&RelaxedTensor; 2],
        z: [&RelaxedTensor; 2],
        rho: [f64; 2],
    ) -> RelaxedTensor {
        self.assert_var_shape(own);
        self.assert_var_shape(other);
        let w = self.decode_vars(own);
        let (_, mut dw) = self.ce_terms(&w);
        let (_, dw_hinge) = self.hinge_terms(&w, favored);
        dw.scaled_add(self.spec.lambda1(), &dw_hinge);
        let mut grad = self.expand_dw(&dw);

        let g = grad.as_mut_slice();
        let own_s = own.as_slice();
        let other_s = other.as_slice();
        let l2 = self.spec.lambda2();
        for i in 0..g.len() {
            g[i] += 2.0 * l2 * (own_s[i] - other_s[i]);
            for j in 0..2 {
                g[i] += z[j].as_slice()[i] + rho[j] * (own_s[i] - u[j].as_slice()[i]);
            }
        }
        grad
    }

    /// Analytic gradient of the augmented Lagrangian with respect to the
    /// flipped variables `bhat`.
    pub fn grad_bhat(&self, view: &AdmmView) -> RelaxedTensor {
        self.grad_common(
            view.bhat,
            view.b,
            FavoredClass::Target,
            [view.u[0], view.u[1]],
            [view.z[0], view.z[1]],
            [view.rho[0], view.rho[1]],
        )
    }

    /// Analytic gradient of the augmented Lagrangian with respect to the
    /// released variables `b`.
    pub fn grad_b(&self, view: &AdmmView) -> RelaxedTensor {
        self.grad_common(
            view.b,
            view.bhat,
            FavoredClass::Source,
            [view.u[2], view.u[3]],
            [view.z[2], view.z[3]],
            [view.rho[2], view.rho[3]],
        )
    }
}
