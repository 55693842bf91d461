//! The neural PDE model: `dU/dt = CNN(U)` integrated as an initial value
//! problem, with temporal order `p` handled by carrying the first `p - 1`
//! time derivatives as extra channels.
//!
//! Gradients come from two independent routes. [`NeuralPdeModel::loss_and_grad_unrolled`]
//! differentiates the discrete solver steps directly and serves as the
//! oracle. [`NeuralPdeModel::loss_and_grad_adjoint`] runs the adjoint
//! method: for Euler it is the discrete adjoint over stored states, for RK4
//! and the adaptive solver it integrates the continuous adjoint system
//! backward in time.

use serde::{Deserialize, Serialize};

use crate::autodiff_cnn::{ConvNet, Gradients};
use crate::error::{Error, Result};
use crate::ode_solve::{euler_step, solve, substeps, OdeState, SolveConfig, SolverMethod};
use crate::tensor_grid::GridField;

/// Scale applied to the initial output-layer weights of a dynamics network.
pub const OUTPUT_GAIN: f64 = 0.1;

/// Integrator settings for model rollouts. Outputs are one time unit apart;
/// fixed-step methods take `ceil(1 / dt)` steps per output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSolver {
    pub method: SolverMethod,
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for ModelSolver {
    fn default() -> Self {
        Self::euler(1.0)
    }
}

impl ModelSolver {
    pub fn euler(dt: f64) -> Self {
        Self { method: SolverMethod::Euler, dt, rtol: 1e-6, atol: 1e-6 }
    }

    pub fn rk4(dt: f64) -> Self {
        Self { method: SolverMethod::Rk4, ..Self::euler(dt) }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self { method: SolverMethod::AdaptiveRk, dt: 1.0, rtol, atol }
    }

    /// Output times `t0 + 1, ..., t0 + horizon`.
    pub fn config(&self, t0: f64, horizon: usize) -> SolveConfig {
        SolveConfig {
            method: self.method,
            dt: self.dt,
            rtol: self.rtol,
            atol: self.atol,
            t0,
            save_at: (1..=horizon).map(|k| t0 + k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPdeModel {
    pub net: ConvNet,
    pub temporal_order: usize,
    pub observed_channels: usize,
    pub solver: ModelSolver,
}

/// Mean squared error and its gradient with respect to the parameters.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

impl NeuralPdeModel {
    /// Checks that `net` maps the augmented state (`p * o` channels) to `o`
    /// channels.
    pub fn new(net: ConvNet, temporal_order: usize, observed_channels: usize, solver: ModelSolver) -> Result<Self> {
        if temporal_order == 0 || observed_channels == 0 {
            return Err(Error::InvalidConfig("temporal order and channel count must be positive".into()));
        }
        let aug = temporal_order * observed_channels;
        if net.in_channels() != aug || net.out_channels() != observed_channels {
            return Err(Error::InvalidConfig(format!(
                "order-{temporal_order} model on {observed_channels} channels needs a {aug} -> {observed_channels} network, got {} -> {}",
                net.in_channels(),
                net.out_channels()
            )));
        }
        Ok(Self { net, temporal_order, observed_channels, solver })
    }

    /// A standard network of the right shape whose output layer is scaled by
    /// [`OUTPUT_GAIN`], so training starts close to the identity flow rather
    /// than from O(1) random time derivatives.
    pub fn init(temporal_order: usize, observed_channels: usize, solver: ModelSolver, seed: u64) -> Result<Self> {
        let mut net = ConvNet::init(temporal_order * observed_channels, observed_channels, seed)?;
        let last = net.layers_mut().last_mut().expect("non-empty");
        last.kernel.weights_mut().iter_mut().for_each(|w| *w *= OUTPUT_GAIN);
        Self::new(net, temporal_order, observed_channels, solver)
    }

    pub fn augmented_channels(&self) -> usize {
        self.temporal_order * self.observed_channels
    }

    /// Appends zero-valued derivative channels to an observed state.
    pub fn augment(&self, u0: &GridField) -> Result<GridField> {
        self.check_channels(u0, self.observed_channels, "NeuralPdeModel::augment")?;
        if self.temporal_order == 1 {
            return Ok(u0.clone());
        }
        let zeros = GridField::zeros(
            crate::Shape::new(self.augmented_channels() - self.observed_channels, u0.height(), u0.width()),
            u0.dx(),
            u0.dy(),
        )?;
        GridField::concat_channels(&[u0, &zeros])
    }

    /// First `o` channels of an augmented state.
    pub fn project(&self, state: &GridField) -> Result<GridField> {
        state.select_channels(0..self.observed_channels)
    }

    /// `[V_1, ..., V_{p-1}, net([U, V_1, ..., V_{p-1}])]`.
    pub fn model_rhs(&self, state: &GridField) -> Result<GridField> {
        self.check_channels(state, self.augmented_channels(), "NeuralPdeModel::model_rhs")?;
        let top = self.net.forward(state)?;
        if self.temporal_order == 1 {
            return Ok(top);
        }
        let lower = state.select_channels(self.observed_channels..self.augmented_channels())?;
        GridField::concat_channels(&[&lower, &top])
    }

    /// Vector-Jacobian product of [`Self::model_rhs`] at `state` with
    /// cotangent `a`, returning `(aᵀ ∂f/∂U, aᵀ ∂f/∂θ)`.
    pub fn rhs_vjp(&self, state: &GridField, a: &GridField) -> Result<(GridField, Gradients)> {
        let o = self.observed_channels;
        let n = self.augmented_channels();
        let top = a.select_channels(n - o..n)?;
        let (g_net, grads) = self.net.backward(state, &top)?;
        if self.temporal_order == 1 {
            return Ok((g_net, grads));
        }
        // Channel block k+1 of the state feeds output block k.
        let mut data = vec![0.0; a.data().len()];
        let plane = a.shape().plane();
        data[o * plane..].copy_from_slice(&a.data()[..(n - o) * plane]);
        for (d, g) in data.iter_mut().zip(g_net.data()) {
            *d += g;
        }
        Ok((GridField::new(a.shape(), a.dx(), a.dy(), data)?, grads))
    }

    /// Closed-loop rollout of `horizon` unit time steps from the observed
    /// state `u0`, projected back to the observed channels.
    pub fn predict(&self, u0: &GridField, horizon: usize) -> Result<Vec<GridField>> {
        self.predict_augmented(&self.augment(u0)?, horizon)?
            .iter()
            .map(|s| self.project(s))
            .collect()
    }

    /// Rollout from a full augmented state, keeping all channels.
    pub fn predict_augmented(&self, state0: &GridField, horizon: usize) -> Result<Vec<GridField>> {
        self.check_channels(state0, self.augmented_channels(), "NeuralPdeModel::predict")?;
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let traj = solve(|_, s: &GridField| self.model_rhs(s), state0, &self.solver.config(0.0, horizon))?;
        Ok(traj.states)
    }

    /// Loss and gradient by reverse-mode differentiation through every
    /// solver step (fixed-step Euler and RK4 only).
    pub fn loss_and_grad_unrolled(&self, u0: &GridField, targets: &[GridField]) -> Result<LossGrad> {
        let tableau = match self.solver.method {
            SolverMethod::Euler => Tableau::euler(),
            SolverMethod::Rk4 => Tableau::rk4(),
            SolverMethod::AdaptiveRk => {
                return Err(Error::InvalidConfig("unrolled gradients need a fixed-step solver".into()))
            }
        };
        let h_count = self.check_targets(u0, targets)?;
        let n = substeps(1.0, self.solver.dt);
        let h = 1.0 / n as f64;

        // Forward, keeping the start state of every step.
        let mut y = self.augment(u0)?;
        let mut starts = Vec::with_capacity(h_count * n);
        let mut outputs = Vec::with_capacity(h_count);
        for _ in 0..h_count {
            for _ in 0..n {
                starts.push(y.clone());
                y = tableau.step(self, &y, h)?;
            }
            outputs.push(y.clone());
        }
        let (loss, dl) = self.mse_and_cotangents(&outputs, targets)?;

        let mut grads = Gradients::zeros_like(&self.net);
        let mut a = self.zero_aug(u0)?;
        for i in (0..h_count).rev() {
            a.add_scaled(1.0, &dl[i])?;
            for k in (0..n).rev() {
                a = tableau.step_vjp(self, &starts[i * n + k], h, &a, &mut grads)?;
            }
        }
        Ok(LossGrad { loss, grads })
    }

    /// Loss and gradient by the adjoint method.
    pub fn loss_and_grad_adjoint(&self, u0: &GridField, targets: &[GridField]) -> Result<LossGrad> {
        let h_count = self.check_targets(u0, targets)?;
        match self.solver.method {
            SolverMethod::Euler => self.adjoint_euler(u0, targets, h_count),
            _ => self.adjoint_continuous(u0, targets, h_count),
        }
    }

    /// Discrete adjoint of forward Euler over stored states:
    /// `a_k = a_{k+1} + h J(U_k)ᵀ a_{k+1}`.
    fn adjoint_euler(&self, u0: &GridField, targets: &[GridField], h_count: usize) -> Result<LossGrad> {
        let n = substeps(1.0, self.solver.dt);
        let h = 1.0 / n as f64;
        let mut rhs = |_: f64, s: &GridField| self.model_rhs(s);
        let mut states = vec![self.augment(u0)?];
        let mut outputs = Vec::with_capacity(h_count);
        for _ in 0..h_count {
            for _ in 0..n {
                let next = euler_step(&mut rhs, 0.0, states.last().expect("non-empty"), h)?;
                states.push(next);
            }
            outputs.push(states.last().expect("non-empty").clone());
        }
        let (loss, dl) = self.mse_and_cotangents(&outputs, targets)?;
        let mut grads = Gradients::zeros_like(&self.net);
        let mut a = self.zero_aug(u0)?;
        for k in (0..h_count * n).rev() {
            if (k + 1) % n == 0 {
                a.add_scaled(1.0, &dl[k / n])?;
            }
            let (ja, jt) = self.rhs_vjp(&states[k], &a)?;
            a.add_scaled(h, &ja)?;
            grads.accumulate(&jt, h);
        }
        Ok(LossGrad { loss, grads })
    }

    /// Continuous adjoint: between observations the system
    /// `[U, a, θ̄]` runs backward with `dU/dt = f`, `da/dt = -Jᵀa`,
    /// `dθ̄/dt = -(∂f/∂θ)ᵀa`, starting each segment from the state stored on
    /// the forward pass.
    fn adjoint_continuous(&self, u0: &GridField, targets: &[GridField], h_count: usize) -> Result<LossGrad> {
        let state0 = self.augment(u0)?;
        let outputs = self.predict_augmented(&state0, h_count)?;
        let (loss, dl) = self.mse_and_cotangents(&outputs, targets)?;
        let mut a = self.zero_aug(u0)?;
        let mut theta = vec![0.0; self.net.param_count()];
        for i in (0..h_count).rev() {
            a.add_scaled(1.0, &dl[i])?;
            let start = AdjointState { u: outputs[i].clone(), a, theta };
            // Reversed time s = t_{i+1} - t runs forward over [0, 1].
            let rev = |_: f64, s: &AdjointState| -> Result<AdjointState> {
                let f = self.model_rhs(&s.u)?;
                let (ja, jt) = self.rhs_vjp(&s.u, &s.a)?;
                Ok(AdjointState { u: f.scale(-1.0), a: ja, theta: jt.to_flat() })
            };
            let cfg = SolveConfig { t0: 0.0, save_at: vec![1.0], ..self.solver.config(0.0, 1) };
            let end = solve(rev, &start, &cfg)?.states.pop().expect("one saved state");
            a = end.a;
            theta = end.theta;
        }
        Ok(LossGrad { loss, grads: Gradients::from_flat(&self.net, &theta)? })
    }

    /// Mean squared error over all steps, channels and grid points, and
    /// `∂L/∂state` per output, zero on the derivative channels.
    fn mse_and_cotangents(&self, outputs: &[GridField], targets: &[GridField]) -> Result<(f64, Vec<GridField>)> {
        let o = self.observed_channels;
        let plane = targets[0].shape().plane();
        let count = (targets.len() * o * plane) as f64;
        let mut sum = 0.0;
        let mut cot = Vec::with_capacity(outputs.len());
        for (out, tgt) in outputs.iter().zip(targets) {
            let mut g = vec![0.0; out.data().len()];
            for (idx, (p, t)) in out.data()[..o * plane].iter().zip(tgt.data()).enumerate() {
                let r = p - t;
                sum += r * r;
                g[idx] = 2.0 * r / count;
            }
            cot.push(GridField::new(out.shape(), out.dx(), out.dy(), g)?);
        }
        Ok((sum / count, cot))
    }

    fn check_targets(&self, u0: &GridField, targets: &[GridField]) -> Result<usize> {
        self.check_channels(u0, self.observed_channels, "NeuralPdeModel::loss")?;
        if targets.is_empty() {
            return Err(Error::InvalidConfig("loss needs at least one target frame".into()));
        }
        for t in targets {
            if t.shape() != u0.shape() {
                return Err(Error::shape("NeuralPdeModel::loss", u0.shape(), t.shape()));
            }
        }
        Ok(targets.len())
    }

    fn check_channels(&self, f: &GridField, want: usize, op: &'static str) -> Result<()> {
        if f.channels() != want {
            return Err(Error::shape(op, format!("{want} channels"), format!("{} channels", f.channels())));
        }
        Ok(())
    }

    fn zero_aug(&self, like: &GridField) -> Result<GridField> {
        GridField::zeros(
            crate::Shape::new(self.augmented_channels(), like.height(), like.width()),
            like.dx(),
            like.dy(),
        )
    }
}

/// Explicit Runge–Kutta scheme in Butcher form, used by the unrolled oracle.
struct Tableau {
    a: Vec<Vec<f64>>,
    /// Output weights as divisors of `h`, matching the solver's `h / 6.0`.
    b_div: Vec<f64>,
}

impl Tableau {
    fn euler() -> Self {
        Self { a: vec![vec![]], b_div: vec![1.0] }
    }

    fn rk4() -> Self {
        Self {
            a: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            b_div: vec![6.0, 3.0, 3.0, 6.0],
        }
    }

    /// Stage inputs and stage derivatives. The arithmetic mirrors the
    /// solver's so the unrolled forward pass reproduces it bitwise.
    fn stages(&self, m: &NeuralPdeModel, y: &GridField, h: f64) -> Result<(Vec<GridField>, Vec<GridField>)> {
        let mut inputs: Vec<GridField> = Vec::with_capacity(self.b_div.len());
        let mut ks: Vec<GridField> = Vec::with_capacity(self.b_div.len());
        for row in &self.a {
            let input = match row.iter().rposition(|&c| c != 0.0) {
                None => y.clone(),
                Some(j) => y.axpy(h * row[j], &ks[j]),
            };
            debug_assert!(row.iter().filter(|&&c| c != 0.0).count() <= 1);
            ks.push(m.model_rhs(&input)?);
            inputs.push(input);
        }
        Ok((inputs, ks))
    }

    fn step(&self, m: &NeuralPdeModel, y: &GridField, h: f64) -> Result<GridField> {
        let (_, ks) = self.stages(m, y, h)?;
        let terms: Vec<(f64, &GridField)> = self.b_div.iter().zip(&ks).map(|(d, k)| (h / d, k)).collect();
        Ok(y.lincomb(&terms))
    }

    /// Pulls the cotangent `a` of the step output back to its input `y`,
    /// accumulating parameter gradients.
    fn step_vjp(
        &self,
        m: &NeuralPdeModel,
        y: &GridField,
        h: f64,
        a: &GridField,
        grads: &mut Gradients,
    ) -> Result<GridField> {
        let (inputs, _) = self.stages(m, y, h)?;
        let s = self.b_div.len();
        let mut k_bar: Vec<GridField> = self.b_div.iter().map(|&d| a.scale(h / d)).collect();
        let mut y_bar = a.clone();
        for i in (0..s).rev() {
            let (g, gt) = m.rhs_vjp(&inputs[i], &k_bar[i])?;
            grads.accumulate(&gt, 1.0);
            y_bar.add_scaled(1.0, &g)?;
            for (j, &c) in self.a[i].iter().enumerate() {
                if c != 0.0 {
                    k_bar[j].add_scaled(h * c, &g)?;
                }
            }
        }
        Ok(y_bar)
    }
}

/// State of the backward adjoint integration.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub u: GridField,
    pub a: GridField,
    pub theta: Vec<f64>,
}

impl OdeState for AdjointState {
    fn axpy(&self, c: f64, x: &Self) -> Self {
        Self {
            u: self.u.axpy(c, &x.u),
            a: self.a.axpy(c, &x.a),
            theta: self.theta.iter().zip(&x.theta).map(|(s, v)| s + c * v).collect(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![self.u.data(), self.a.data(), &self.theta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff_cnn::{Activation, Layer};
    use crate::stencils::StencilSet;
    use crate::tensor_grid::{Kernel, Shape};
    use crate::{PdeParams, PdeSystem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64, c: usize, n: usize) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridField::from_fn(Shape::new(c, n, n), 0.1, 0.1, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Random standard net with outputs shrunk so rollouts stay tame.
    fn model(order: usize, o: usize, solver: ModelSolver, seed: u64, out_scale: f64) -> NeuralPdeModel {
        let mut m = NeuralPdeModel::init(order, o, solver, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for l in m.net.layers_mut() {
            l.kernel.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
        let last = m.net.layers_mut().last_mut().unwrap();
        last.kernel.weights_mut().iter_mut().for_each(|w| *w *= out_scale);
        last.kernel.bias_mut().iter_mut().for_each(|b| *b *= out_scale);
        m
    }

    fn zero_model(order: usize, o: usize) -> NeuralPdeModel {
        let mut m = NeuralPdeModel::init(order, o, ModelSolver::default(), 0).unwrap();
        let zeros = vec![0.0; m.net.param_count()];
        m.net.set_flat(&zeros).unwrap();
        m
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64, floor: f64) {
        let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor * scale);
            assert!(rel <= tol, "entry {i}: {x} vs {y} (rel {rel:e})");
        }
    }

    #[test]
    fn shape_contract() {
        let net = ConvNet::init(1, 1, 0).unwrap();
        assert!(NeuralPdeModel::new(net.clone(), 2, 1, ModelSolver::default()).is_err());
        assert!(NeuralPdeModel::new(net, 1, 1, ModelSolver::default()).is_ok());
        let m = NeuralPdeModel::init(2, 3, ModelSolver::default(), 0).unwrap();
        assert_eq!((m.net.in_channels(), m.net.out_channels()), (6, 3));
        assert!(m.predict(&field(0, 2, 4), 1).is_err());
    }

    #[test]
    fn zero_net_rhs() {
        let m = zero_model(1, 2);
        assert_eq!(m.model_rhs(&field(1, 2, 5)).unwrap().max_abs(), 0.0);

        let m = zero_model(2, 1);
        let u = field(2, 1, 5);
        let v = GridField::constant(u.shape(), 0.1, 0.1, 0.7).unwrap();
        let d = m.model_rhs(&GridField::concat_channels(&[&u, &v]).unwrap()).unwrap();
        assert!(d.channel(0).iter().all(|&x| x == 0.7));
        assert!(d.channel(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn order_two_rhs_matches_hand_assembly() {
        let m = model(2, 2, ModelSolver::default(), 3, 1.0);
        let s = field(4, 4, 6);
        let d = m.model_rhs(&s).unwrap();
        let top = m.net.forward(&s).unwrap();
        assert_eq!(&d.data()[..72], &s.data()[72..]);
        assert_eq!(&d.data()[72..], top.data());
    }

    #[test]
    fn zero_net_predicts_constant() {
        let m = zero_model(2, 1);
        let u0 = field(5, 1, 5);
        let p = m.predict(&u0, 3).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|f| f == &u0));
    }

    #[test]
    fn one_euler_step_closed_form() {
        let m = model(1, 1, ModelSolver::euler(1.0), 6, 1.0);
        let u0 = field(7, 1, 6);
        let p = m.predict(&u0, 1).unwrap();
        let expect = GridField::axpy(1.0, &m.net.forward(&u0).unwrap(), &u0).unwrap();
        assert_eq!(p[0], expect);
    }

    /// One linear layer carrying the advection-diffusion stencil.
    pub(crate) fn stencil_model(sys: &PdeSystem, dx: f64) -> NeuralPdeModel {
        let PdeParams::AdvectionDiffusion { c_x, c_y, d } = sys.params else { panic!() };
        let st = StencilSet::new(dx, dx).unwrap();
        let mut w = vec![0.0; 9];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = sys.scale
                * (-c_x * st.d_dx_kernel().weights()[i] - c_y * st.d_dy_kernel().weights()[i]
                    + d * st.laplacian_kernel().weights()[i]);
        }
        let net = ConvNet::from_layers(vec![Layer {
            kernel: Kernel::new(1, 1, 3, 3, w, vec![0.0]).unwrap(),
            activation: Activation::Linear,
        }])
        .unwrap();
        NeuralPdeModel::new(net, 1, 1, ModelSolver::euler(1.0)).unwrap()
    }

    #[test]
    fn planted_stencil_reproduces_euler_step() {
        let sys = PdeSystem::advection_diffusion();
        let u0 = field(8, 1, 10);
        let m = stencil_model(&sys, 0.1);
        let pred = m.predict(&u0, 1).unwrap().remove(0);
        let expect = GridField::axpy(1.0, &sys.rhs(&u0).unwrap(), &u0).unwrap();
        for (a, b) in pred.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn time_homogeneity() {
        for solver in [ModelSolver::euler(1.0), ModelSolver::rk4(0.5)] {
            let m = model(1, 2, solver, 9, 0.3);
            let u0 = field(10, 2, 6);
            let two = m.predict(&u0, 2).unwrap();
            let once = m.predict(&u0, 1).unwrap().remove(0);
            let twice = m.predict(&once, 1).unwrap().remove(0);
            assert_eq!(two[0], once);
            assert_eq!(two[1], twice);
        }
    }

    #[test]
    fn extra_passive_channels_do_not_leak() {
        let m = model(2, 1, ModelSolver::rk4(0.5), 11, 0.3);
        let u0 = field(12, 1, 6);
        let direct = m.predict(&u0, 3).unwrap();
        // Carry an extra zero channel with zero derivative alongside [U, V].
        let aug = m.augment(&u0).unwrap();
        let extra = GridField::zeros(Shape::new(1, 6, 6), 0.1, 0.1).unwrap();
        let s0 = GridField::concat_channels(&[&aug, &extra]).unwrap();
        let rhs = |_: f64, s: &GridField| -> Result<GridField> {
            let d = m.model_rhs(&s.select_channels(0..2)?)?;
            GridField::concat_channels(&[&d, &s.select_channels(2..3)?.scale(0.0)])
        };
        let traj = solve(rhs, &s0, &m.solver.config(0.0, 3)).unwrap();
        for (p, s) in direct.iter().zip(&traj.states) {
            assert_eq!(p, &m.project(s).unwrap());
        }
    }

    #[test]
    fn perfect_targets_give_zero_loss() {
        let m = model(2, 1, ModelSolver::euler(1.0), 13, 0.3);
        let u0 = field(14, 1, 6);
        let targets = m.predict(&u0, 3).unwrap();
        for lg in [m.loss_and_grad_unrolled(&u0, &targets).unwrap(), m.loss_and_grad_adjoint(&u0, &targets).unwrap()] {
            assert_eq!(lg.loss, 0.0);
            assert_eq!(lg.grads.max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_net_with_constant_targets_gives_zero_gradient() {
        let m = zero_model(1, 1);
        let u0 = field(15, 1, 6);
        let targets = vec![u0.clone(); 4];
        let lg = m.loss_and_grad_adjoint(&u0, &targets).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert_eq!(lg.grads.max_abs(), 0.0);
    }

    #[test]
    fn loss_matches_scripted_mse() {
        let m = model(1, 2, ModelSolver::rk4(0.5), 16, 0.5);
        let u0 = field(17, 2, 6);
        let targets: Vec<_> = (0..3).map(|k| field(18 + k, 2, 6)).collect();
        let pred = m.predict(&u0, 3).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, t) in pred.iter().zip(&targets) {
            for (a, b) in p.data().iter().zip(t.data()) {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
        let lg = m.loss_and_grad_unrolled(&u0, &targets).unwrap();
        assert_eq!(lg.loss, sum / n as f64);
    }

    fn fd_grad(m: &NeuralPdeModel, u0: &GridField, targets: &[GridField]) -> Vec<f64> {
        let theta = m.net.to_flat();
        let eps = 1e-6;
        let loss = |t: &[f64]| {
            let mut mm = m.clone();
            mm.net.set_flat(t).unwrap();
            mm.loss_and_grad_unrolled(u0, targets).unwrap().loss
        };
        (0..theta.len())
            .map(|i| {
                let mut t = theta.clone();
                t[i] += eps;
                let lp = loss(&t);
                t[i] -= 2.0 * eps;
                (lp - loss(&t)) / (2.0 * eps)
            })
            .collect()
    }

    fn small_model(order: usize, solver: ModelSolver, seed: u64) -> NeuralPdeModel {
        // Two narrow layers keep the finite-difference sweep quick.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = |o, i| {
            Kernel::new(o, i, 3, 3, (0..o * i * 9).map(|_| rng.gen_range(-0.3..0.3)).collect(), (0..o).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()
        };
        let net = ConvNet::from_layers(vec![
            Layer { kernel: k(3, order), activation: Activation::Selu },
            Layer { kernel: k(1, 3), activation: Activation::Linear },
        ])
        .unwrap();
        NeuralPdeModel::new(net, order, 1, solver).unwrap()
    }

    #[test]
    fn unrolled_matches_finite_differences() {
        for (order, solver) in [(1, ModelSolver::euler(1.0)), (2, ModelSolver::rk4(0.5))] {
            let m = small_model(order, solver, 19);
            let u0 = field(20, 1, 6);
            let targets = vec![field(21, 1, 6), field(22, 1, 6)];
            let lg = m.loss_and_grad_unrolled(&u0, &targets).unwrap();
            rel_close(&lg.grads.to_flat(), &fd_grad(&m, &u0, &targets), 1e-5, 1e-4);
        }
    }

    #[test]
    fn euler_adjoint_equals_unrolled() {
        for (order, h) in [(1, 1), (2, 2), (1, 4)] {
            let m = model(order, 1, ModelSolver::euler(1.0), 23 + h as u64, 0.3);
            let u0 = field(30, 1, 6);
            let targets: Vec<_> = (0..h).map(|k| field(31 + k as u64, 1, 6)).collect();
            let un = m.loss_and_grad_unrolled(&u0, &targets).unwrap();
            let ad = m.loss_and_grad_adjoint(&u0, &targets).unwrap();
            assert_eq!(un.loss, ad.loss);
            rel_close(&ad.grads.to_flat(), &un.grads.to_flat(), 1e-8, 1e-6);
        }
    }

    #[test]
    fn euler_adjoint_with_substeps() {
        let m = model(2, 1, ModelSolver::euler(0.5), 40, 0.3);
        let u0 = field(41, 1, 6);
        let targets = vec![field(42, 1, 6), field(43, 1, 6)];
        let un = m.loss_and_grad_unrolled(&u0, &targets).unwrap();
        let ad = m.loss_and_grad_adjoint(&u0, &targets).unwrap();
        rel_close(&ad.grads.to_flat(), &un.grads.to_flat(), 1e-8, 1e-6);
    }

    #[test]
    fn continuous_adjoint_matches_finite_differences() {
        let m = small_model(1, ModelSolver::rk4(0.1), 44);
        let u0 = field(45, 1, 6);
        let targets = vec![field(46, 1, 6), field(47, 1, 6)];
        let ad = m.loss_and_grad_adjoint(&u0, &targets).unwrap();
        rel_close(&ad.grads.to_flat(), &fd_grad(&m, &u0, &targets), 1e-4, 1e-3);
    }

    #[test]
    fn adaptive_adjoint_matches_fine_oracle() {
        // Keep the hidden pre-activations negative so SELU stays smooth;
        // across its kink, fixed-step gradients jitter at the 1e-4 level and
        // stop converging.
        let mut m = small_model(1, ModelSolver::adaptive(1e-10, 1e-10), 44);
        m.net.layers_mut()[0].kernel.bias_mut().iter_mut().for_each(|b| *b -= 4.0);
        let u0 = field(45, 1, 6);
        let targets = vec![field(46, 1, 6), field(47, 1, 6)];
        let ad = m.loss_and_grad_adjoint(&u0, &targets).unwrap();
        let oracle = NeuralPdeModel { solver: ModelSolver::rk4(0.01), ..m.clone() };
        rel_close(&ad.grads.to_flat(), &fd_grad(&oracle, &u0, &targets), 1e-4, 1e-3);
    }

    #[test]
    fn unrolled_rejects_adaptive() {
        let m = small_model(1, ModelSolver::adaptive(1e-6, 1e-6), 48);
        let u0 = field(49, 1, 6);
        assert!(m.loss_and_grad_unrolled(&u0, std::slice::from_ref(&u0)).is_err());
    }
}
