//! Network layers, forward and reverse passes, and the Adam optimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{FeatureRow, ScalerStats, FEATURE_DIM};

#[derive(Debug, Error)]
pub enum PinetError {
    #[error("empty measurement set")]
    EmptySet,
    #[error("forward cache does not match model or input: {0}")]
    CacheMismatch(String),
    #[error("model file error: {0}")]
    BadModelFile(String),
    #[error("model file version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("model file corrupt: {0}")]
    CorruptFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has no labels")]
    NoLabels,
    #[error("fix did not converge")]
    UnconvergedFix,
}

/// One dense layer: out x in weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerParams {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: DMatrix::zeros(out, inp), bias: DVector::zeros(out) }
    }

    fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        // Uniform fan-in scaling, +-sqrt(1/fan_in).
        let limit = (1.0 / inp as f64).sqrt();
        let weight = DMatrix::from_fn(out, inp, |_, _| rng.gen_range(-limit..limit));
        let bias = DVector::from_fn(out, |_, _| rng.gen_range(-limit..limit));
        Self { weight, bias }
    }

    pub fn count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer widths of the encoder/decoder stacks plus dropout placement
/// (index of the linear layer whose output is dropped, before the
/// following activation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub encoder_dropout_layer: Option<usize>,
    pub decoder_dropout_layer: Option<usize>,
}

impl ModelArch {
    /// The reference architecture: encoder {32, 64, 128, 256} with dropout
    /// after the third linear, decoder {128, 64, 32, 32, out} with dropout
    /// after its third linear.
    pub fn standard(output_dim: usize) -> Self {
        Self {
            input_dim: FEATURE_DIM,
            encoder_widths: vec![32, 64, 128, 256],
            decoder_widths: vec![128, 64, 32, 32, output_dim],
            encoder_dropout_layer: Some(2),
            decoder_dropout_layer: Some(2),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.decoder_widths.last().expect("decoder has layers")
    }

    pub fn pooled_dim(&self) -> usize {
        *self.encoder_widths.last().expect("encoder has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiDnnModel {
    pub arch: ModelArch,
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
    pub leaky_alpha: f64,
    pub dropout_rate: f64,
    pub scaler: ScalerStats,
    pub rng_seed: u64,
}

impl PiDnnModel {
    pub fn new(arch: ModelArch, scaler: ScalerStats, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut prev = arch.input_dim;
        for &w in &arch.encoder_widths {
            encoder.push(LayerParams::init(w, prev, &mut rng));
            prev = w;
        }
        let mut decoder = Vec::new();
        for &w in &arch.decoder_widths {
            decoder.push(LayerParams::init(w, prev, &mut rng));
            prev = w;
        }
        Self {
            arch,
            encoder,
            decoder,
            leaky_alpha: 0.1,
            dropout_rate: 0.02,
            scaler,
            rng_seed: seed,
        }
    }

    pub fn standard(output_dim: usize, scaler: ScalerStats, seed: u64) -> Self {
        Self::new(ModelArch::standard(output_dim), scaler, seed)
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Derivative of Leaky ReLU; at x = 0 the subgradient alpha is used.
pub fn leaky_relu_deriv(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        alpha
    }
}

/// Columnwise sum of encoded rows, computed as a pairwise tree over rows
/// pre-sorted by value. The fixed summation order makes the pooled vector
/// bitwise independent of the input row order.
pub fn sum_pool(encoded: &[DVector<f64>]) -> Result<DVector<f64>, PinetError> {
    if encoded.is_empty() {
        return Err(PinetError::EmptySet);
    }
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by(|&a, &b| {
        encoded[a]
            .iter()
            .partial_cmp(encoded[b].iter())
            .expect("non-finite encoder output")
    });
    let sorted: Vec<&DVector<f64>> = order.iter().map(|&i| &encoded[i]).collect();
    Ok(tree_sum(&sorted))
}

fn tree_sum(rows: &[&DVector<f64>]) -> DVector<f64> {
    match rows.len() {
        1 => rows[0].clone(),
        2 => rows[0] + rows[1],
        n => {
            let mid = n / 2;
            tree_sum(&rows[..mid]) + tree_sum(&rows[mid..])
        }
    }
}

/// Mean over components of the squared error.
pub fn mse_loss(pred: &DVector<f64>, label: &DVector<f64>) -> f64 {
    assert_eq!(pred.len(), label.len());
    (pred - label).norm_squared() / pred.len() as f64
}

pub fn mse_loss_grad(pred: &DVector<f64>, label: &DVector<f64>) -> DVector<f64> {
    assert_eq!(pred.len(), label.len());
    (pred - label) * (2.0 / pred.len() as f64)
}

/// Dropout behavior of a forward pass.
pub enum Mode<'a> {
    /// Dropout disabled; deterministic.
    Infer,
    /// Inverted dropout with masks drawn from the rng and recorded in the
    /// cache, so inference needs no rescale.
    Train(&'a mut ChaCha8Rng),
    /// Replay the masks of an earlier cache (finite-difference checks).
    Replay(&'a ForwardCache),
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Input to the linear map.
    input: DVector<f64>,
    /// Post-dropout pre-activation.
    z: DVector<f64>,
    mask: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    row_layers: Vec<Vec<LayerCache>>,
    decoder_layers: Vec<LayerCache>,
    num_rows: usize,
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(model: &PiDnnModel) -> Self {
        let z = |ls: &Vec<LayerParams>| {
            ls.iter()
                .map(|l| LayerParams::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect()
        };
        Self { encoder: z(&model.encoder), decoder: z(&model.decoder) }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.weight += &b.weight * s;
            a.bias += &b.bias * s;
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            a.weight += &b.weight * s;
            a.bias += &b.bias * s;
        }
    }
}

fn run_stack(
    layers: &[LayerParams],
    dropout_at: Option<usize>,
    dropout_rate: f64,
    alpha: f64,
    input: &DVector<f64>,
    mode: &mut Mode<'_>,
    replay: Option<&[LayerCache]>,
    caches: &mut Vec<LayerCache>,
) {
    let mut a = input.clone();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let input_l = a.clone();
        let mut z = &layer.weight * &a + &layer.bias;
        let mut mask = None;
        if dropout_at == Some(l) {
            match mode {
                Mode::Infer => {}
                Mode::Train(rng) => {
                    let keep = 1.0 - dropout_rate;
                    let m = DVector::from_fn(z.len(), |_, _| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    z.component_mul_assign(&m);
                    mask = Some(m);
                }
                Mode::Replay(_) => {
                    let m = replay
                        .and_then(|rl| rl.get(l))
                        .and_then(|c| c.mask.clone())
                        .expect("replay cache lacks dropout mask");
                    z.component_mul_assign(&m);
                    mask = Some(m);
                }
            }
        }
        // Activation after every layer except the stack's last.
        a = if l < last {
            z.map(|v| leaky_relu(v, alpha))
        } else {
            z.clone()
        };
        caches.push(LayerCache { input: input_l, z, mask });
    }
}

fn stack_output(caches: &[LayerCache]) -> DVector<f64> {
    caches.last().expect("stack ran").z.clone()
}

/// Forward pass over an M x d set of scaled feature rows: encode each row,
/// sum-pool, decode. Returns the prediction and the activation cache needed
/// by [`backward`].
pub fn forward(
    model: &PiDnnModel,
    rows: &[FeatureRow],
    mut mode: Mode<'_>,
) -> Result<(DVector<f64>, ForwardCache), PinetError> {
    if rows.is_empty() {
        return Err(PinetError::EmptySet);
    }
    let mut row_layers = Vec::with_capacity(rows.len());
    let mut encoded = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let x = DVector::from_row_slice(&row.as_array());
        let replay: Option<&[LayerCache]> = match &mode {
            Mode::Replay(c) => Some(&c.row_layers[i]),
            _ => None,
        };
        // Work around borrow of mode inside the loop.
        let replay_owned = replay.map(|r| r.to_vec());
        let mut caches = Vec::with_capacity(model.encoder.len());
        run_stack(
            &model.encoder,
            model.arch.encoder_dropout_layer,
            model.dropout_rate,
            model.leaky_alpha,
            &x,
            &mut mode,
            replay_owned.as_deref(),
            &mut caches,
        );
        encoded.push(stack_output(&caches));
        row_layers.push(caches);
    }

    let pooled = sum_pool(&encoded)?;

    let replay_dec = match &mode {
        Mode::Replay(c) => Some(c.decoder_layers.to_vec()),
        _ => None,
    };
    let mut decoder_layers = Vec::with_capacity(model.decoder.len());
    run_stack(
        &model.decoder,
        model.arch.decoder_dropout_layer,
        model.dropout_rate,
        model.leaky_alpha,
        &pooled,
        &mut mode,
        replay_dec.as_deref(),
        &mut decoder_layers,
    );
    let out = stack_output(&decoder_layers);
    Ok((out, ForwardCache { row_layers, decoder_layers, num_rows: rows.len() }))
}

fn backward_stack(
    layers: &[LayerParams],
    caches: &[LayerCache],
    alpha: f64,
    mut delta: DVector<f64>,
    grads: &mut [LayerParams],
) -> DVector<f64> {
    let last = layers.len() - 1;
    for l in (0..layers.len()).rev() {
        let c = &caches[l];
        // delta is w.r.t. the layer output a_l; peel activation first.
        let mut dz = if l < last {
            DVector::from_fn(delta.len(), |i, _| delta[i] * leaky_relu_deriv(c.z[i], alpha))
        } else {
            delta.clone()
        };
        if let Some(mask) = &c.mask {
            dz.component_mul_assign(mask);
        }
        grads[l].weight += &dz * c.input.transpose();
        grads[l].bias += &dz;
        delta = layers[l].weight.transpose() * dz;
    }
    delta
}

/// Exact reverse-mode gradients of the forward composition. The sum-pool
/// backward broadcasts the upstream gradient to every row.
pub fn backward(
    model: &PiDnnModel,
    cache: &ForwardCache,
    loss_grad: &DVector<f64>,
) -> Result<Gradients, PinetError> {
    if cache.decoder_layers.len() != model.decoder.len()
        || cache.row_layers.iter().any(|r| r.len() != model.encoder.len())
    {
        return Err(PinetError::CacheMismatch("layer count".into()));
    }
    if loss_grad.len() != model.output_dim() {
        return Err(PinetError::CacheMismatch("loss gradient dimension".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let d_pooled = backward_stack(
        &model.decoder,
        &cache.decoder_layers,
        model.leaky_alpha,
        loss_grad.clone(),
        &mut grads.decoder,
    );
    for row_cache in &cache.row_layers {
        backward_stack(
            &model.encoder,
            row_cache,
            model.leaky_alpha,
            d_pooled.clone(),
            &mut grads.encoder,
        );
    }
    debug_assert_eq!(cache.num_rows, cache.row_layers.len());
    Ok(grads)
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators mirroring the model shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &PiDnnModel) -> Self {
        Self { m: Gradients::zeros_like(model), v: Gradients::zeros_like(model), t: 0 }
    }
}

fn adam_update_layer(
    param: &mut LayerParams,
    grad: &LayerParams,
    m: &mut LayerParams,
    v: &mut LayerParams,
    t: u64,
    c: &AdamConfig,
) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    };
    for i in 0..param.weight.len() {
        update(&mut param.weight[i], grad.weight[i], &mut m.weight[i], &mut v.weight[i]);
    }
    for i in 0..param.bias.len() {
        update(&mut param.bias[i], grad.bias[i], &mut m.bias[i], &mut v.bias[i]);
    }
}

/// One standard bias-corrected Adam step, in place.
pub fn adam_step(
    model: &mut PiDnnModel,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) {
    state.t += 1;
    for l in 0..model.encoder.len() {
        adam_update_layer(
            &mut model.encoder[l],
            &grads.encoder[l],
            &mut state.m.encoder[l],
            &mut state.v.encoder[l],
            state.t,
            config,
        );
    }
    for l in 0..model.decoder.len() {
        adam_update_layer(
            &mut model.decoder[l],
            &grads.decoder[l],
            &mut state.m.decoder[l],
            &mut state.v.decoder[l],
            state.t,
            config,
        );
    }
}

/// Per-layer parameter counts, encoder then decoder.
pub fn param_count_per_layer(model: &PiDnnModel) -> Vec<usize> {
    model
        .encoder
        .iter()
        .chain(&model.decoder)
        .map(LayerParams::count)
        .collect()
}

pub fn param_count(model: &PiDnnModel) -> usize {
    param_count_per_layer(model).iter().sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn unit_scaler() -> ScalerStats {
        ScalerStats { mean: [0.0; FEATURE_DIM], std: [1.0; FEATURE_DIM] }
    }

    pub(crate) fn random_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureRow> {
        (0..n)
            .map(|_| {
                let mut a = [0.0; FEATURE_DIM];
                for v in &mut a {
                    *v = rng.gen_range(-2.0..2.0);
                }
                FeatureRow::from_array(a)
            })
            .collect()
    }

    #[test]
    fn leaky_relu_reference_values() {
        assert_eq!(leaky_relu(5.0, 0.1), 5.0);
        assert_eq!(leaky_relu(-10.0, 0.1), -1.0);
    }

    #[test]
    fn leaky_relu_derivative_matches_finite_difference() {
        for x in [0.7, -0.7] {
            let h = 1e-7;
            let fd = (leaky_relu(x + h, 0.1) - leaky_relu(x - h, 0.1)) / (2.0 * h);
            assert!((leaky_relu_deriv(x, 0.1) - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut model = PiDnnModel::standard(3, unit_scaler(), 1);
        for l in model.encoder.iter_mut().chain(model.decoder.iter_mut()) {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = random_rows(6, &mut rng);
        let (out, _) = forward(&model, &rows, Mode::Infer).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let model = PiDnnModel::standard(3, unit_scaler(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = random_rows(6, &mut rng);
        let (a, _) = forward(&model, &rows, Mode::Infer).unwrap();
        let (b, _) = forward(&model, &rows, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let model = PiDnnModel::standard(3, unit_scaler(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_rows(6, &mut rng);
        let (a, _) = forward(&model, &rows, Mode::Infer).unwrap();
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(1, 3);
        let (b, _) = forward(&model, &perm, Mode::Infer).unwrap();
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_pool_basics() {
        let v1 = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(sum_pool(&[v1.clone()]).unwrap(), v1);
        let v2 = -v1.clone();
        let z = sum_pool(&[v1.clone(), v2]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(matches!(sum_pool(&[]), Err(PinetError::EmptySet)));
    }

    #[test]
    fn sum_pool_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<DVector<f64>> =
            (0..10).map(|_| DVector::from_fn(16, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let pooled = sum_pool(&rows).unwrap();
        let mut naive = DVector::zeros(16);
        for r in rows.iter().rev() {
            naive += r;
        }
        for i in 0..16 {
            assert!((pooled[i] - naive[i]).abs() <= 1e-9 * naive[i].abs().max(1.0));
        }
    }

    #[test]
    fn duplicating_all_rows_doubles_pooled_output() {
        // Distinguishes sum pooling from mean pooling.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<DVector<f64>> =
            (0..4).map(|_| DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let single = sum_pool(&rows).unwrap();
        let mut doubled_rows = rows.clone();
        doubled_rows.extend(rows.iter().cloned());
        let doubled = sum_pool(&doubled_rows).unwrap();
        for i in 0..8 {
            assert!((doubled[i] - 2.0 * single[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_loss_values_and_gradient() {
        let pred = DVector::from_vec(vec![3.0, 0.0, 0.0]);
        let label = DVector::zeros(3);
        assert_eq!(mse_loss(&pred, &label), 3.0);
        assert_eq!(mse_loss(&label, &label), 0.0);
        let g = mse_loss_grad(&pred, &label);
        // finite difference on the first component
        let h = 1e-6;
        let mut p2 = pred.clone();
        p2[0] += h;
        let fd = (mse_loss(&p2, &label) - mse_loss(&pred, &label)) / h;
        assert!((g[0] - fd).abs() < 1e-5);
        assert_eq!(g[1], 0.0);
    }

    fn reduced_model() -> PiDnnModel {
        PiDnnModel::new(
            ModelArch {
                input_dim: FEATURE_DIM,
                encoder_widths: vec![4],
                decoder_widths: vec![3, 3],
                encoder_dropout_layer: None,
                decoder_dropout_layer: Some(0),
            },
            unit_scaler(),
            42,
        )
    }

    /// Central finite-difference sweep over every parameter.
    pub(crate) fn finite_difference_max_rel_error(model: &mut PiDnnModel, rows: &[FeatureRow]) -> f64 {
        let label = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, cache) = forward(model, rows, Mode::Train(&mut rng)).unwrap();
        let loss_of = |m: &PiDnnModel| {
            let (p, _) = forward(m, rows, Mode::Replay(&cache)).unwrap();
            mse_loss(&p, &label)
        };
        let (pred, _) = forward(model, rows, Mode::Replay(&cache)).unwrap();
        let grads = backward(model, &cache, &mse_loss_grad(&pred, &label)).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let enc_layers = model.encoder.len();
        for stack in 0..2 {
            let layers = if stack == 0 { enc_layers } else { model.decoder.len() };
            for l in 0..layers {
                let (wlen, blen) = {
                    let lp = if stack == 0 { &model.encoder[l] } else { &model.decoder[l] };
                    (lp.weight.len(), lp.bias.len())
                };
                for k in 0..(wlen + blen) {
                    let get = |m: &mut PiDnnModel| -> *mut f64 {
                        let lp = if stack == 0 { &mut m.encoder[l] } else { &mut m.decoder[l] };
                        if k < wlen { &mut lp.weight[k] } else { &mut lp.bias[k - wlen] }
                    };
                    let p = get(model);
                    let orig = unsafe { *p };
                    unsafe { *p = orig + h };
                    let up = loss_of(model);
                    unsafe { *p = orig - h };
                    let down = loss_of(model);
                    unsafe { *p = orig };
                    let fd = (up - down) / (2.0 * h);
                    let gl = if stack == 0 { &grads.encoder[l] } else { &grads.decoder[l] };
                    let an = if k < wlen { gl.weight[k] } else { gl.bias[k - wlen] };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    if rel > max_rel {
                        max_rel = rel;
                    }
                }
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = reduced_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_rows(3, &mut rng);
        let max_rel = finite_difference_max_rel_error(&mut model, &rows);
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let model = reduced_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = random_rows(3, &mut rng);
        let (_, cache) = forward(&model, &rows, Mode::Infer).unwrap();
        let grads = backward(&model, &cache, &DVector::zeros(3)).unwrap();
        for l in grads.encoder.iter().chain(&grads.decoder) {
            assert!(l.weight.iter().all(|v| *v == 0.0));
            assert!(l.bias.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn duplicated_row_doubles_first_layer_contribution() {
        let model = reduced_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows = random_rows(1, &mut rng);
        let label = DVector::zeros(3);

        let (p1, c1) = forward(&model, &rows, Mode::Infer).unwrap();
        let g1 = backward(&model, &c1, &mse_loss_grad(&p1, &label)).unwrap();

        let doubled = vec![rows[0], rows[0]];
        let (p2, c2) = forward(&model, &doubled, Mode::Infer).unwrap();
        let g2 = backward(&model, &c2, &mse_loss_grad(&p2, &label)).unwrap();

        // With the same upstream gradient, the duplicated row contributes
        // twice to the encoder first layer. Normalize for the different
        // predictions by comparing per-unit-loss-grad structure instead:
        // feed an explicit unit gradient through both caches.
        let unit = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let ga = backward(&model, &c1, &unit).unwrap();
        let gb = backward(&model, &c2, &unit).unwrap();
        let _ = (p2, g1, g2);
        let a = &ga.encoder[0].weight;
        let b = &gb.encoder[0].weight;
        for i in 0..a.len() {
            assert!((b[i] - 2.0 * a[i]).abs() < 1e-9, "entry {i}: {} vs {}", b[i], a[i]);
        }
    }

    #[test]
    fn cache_mismatch_detected() {
        let model = reduced_model();
        let big = PiDnnModel::standard(3, unit_scaler(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = random_rows(2, &mut rng);
        let (_, cache) = forward(&big, &rows, Mode::Infer).unwrap();
        assert!(matches!(
            backward(&model, &cache, &DVector::zeros(3)),
            Err(PinetError::CacheMismatch(_))
        ));
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut model = reduced_model();
        let mut grads = Gradients::zeros_like(&model);
        grads.encoder[0].weight[0] = 1.0;
        let before = model.encoder[0].weight[0];
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, &AdamConfig::default());
        let step = model.encoder[0].weight[0] - before;
        assert!((step + 0.001).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut model = reduced_model();
        let reference = model.clone();
        let grads = Gradients::zeros_like(&model);
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, &AdamConfig::default());
        assert_eq!(model.encoder, reference.encoder);
        assert_eq!(model.decoder, reference.decoder);
    }

    #[test]
    fn adam_is_deterministic() {
        let make = || {
            let mut model = reduced_model();
            let mut grads = Gradients::zeros_like(&model);
            grads.decoder[0].bias[1] = -0.3;
            grads.encoder[0].weight[5] = 0.7;
            let mut state = AdamState::new(&model);
            for _ in 0..3 {
                adam_step(&mut model, &grads, &mut state, &AdamConfig::default());
            }
            model
        };
        let a = make();
        let b = make();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn param_count_matches_reference_table() {
        let m1 = PiDnnModel::standard(1, unit_scaler(), 0);
        assert_eq!(
            param_count_per_layer(&m1),
            vec![256, 2112, 8320, 33024, 32896, 8256, 2080, 1056, 33]
        );
        assert_eq!(param_count(&m1), 88033);
        let m3 = PiDnnModel::standard(3, unit_scaler(), 0);
        assert_eq!(param_count(&m3), 88099);
    }

    #[test]
    fn dropout_expectation_matches_infer() {
        // Monte-Carlo over masks: mean train-mode output of a layer with
        // inverted dropout approaches the infer-mode output.
        let model = PiDnnModel::standard(3, unit_scaler(), 17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows = random_rows(5, &mut rng);
        let (infer_out, _) = forward(&model, &rows, Mode::Infer).unwrap();
        let trials = 10_000;
        let mut mean = DVector::zeros(3);
        for _ in 0..trials {
            let (o, _) = forward(&model, &rows, Mode::Train(&mut rng)).unwrap();
            mean += o;
        }
        mean /= trials as f64;
        // Nonlinearities after each dropout make exact equality impossible;
        // at 2% drop the deviation stays well under 1%.
        for i in 0..3 {
            let rel = (mean[i] - infer_out[i]).abs() / infer_out[i].abs().max(1e-6);
            assert!(rel < 0.01, "component {i}: {} vs {}", mean[i], infer_out[i]);
        }
    }
}
