//! The three networks. Classifier and embedder share one convolutional
//! encoder (per block: 3x3 conv, batch norm, relu, then a stride-2 copy of
//! the same) followed by global average pooling and a linear head. The
//! generator reuses that encoder and mirrors it with upsampling blocks; each
//! decoder block receives the encoder feature of the same resolution by
//! channel concatenation and ends in batch norm before its activation. The
//! final decoder activation is a sigmoid producing the 1-channel weight map
//! at the input resolution.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, ParamStore, Result, Tape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn training(self) -> bool {
        self == Mode::Train
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, values).expect("consistent by construction")
}

pub struct Conv2d {
    pub weight: Tensor,
    stride: usize,
}

impl Conv2d {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Conv2d {
        Conv2d { weight: uniform_fan_in(rng, &[cout, cin, 3, 3], cin * 9), stride }
    }

    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv2d(x, &self.weight, self.stride)
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    fn init(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("consistent"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("consistent"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        tape.batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            mode.training(),
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

pub struct Linear {
    /// Stored as [in, out] so the forward pass is a plain matmul.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Linear {
        Linear {
            weight: uniform_fan_in(rng, &[input, output], input),
            bias: Tensor::param(&[output], vec![0.0; output]).expect("consistent"),
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.weight)?;
        tape.add(&y, &self.bias)
    }
}

struct EncoderBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl EncoderBlock {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> EncoderBlock {
        EncoderBlock {
            conv1: Conv2d::init(rng, cin, cout, 1),
            bn1: BatchNorm2d::init(cout),
            conv2: Conv2d::init(rng, cout, cout, 2),
            bn2: BatchNorm2d::init(cout),
        }
    }

    /// Returns (full-resolution feature for skip use, downsampled output).
    fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let h = tape.relu(&self.bn1.forward(tape, &self.conv1.forward(tape, x)?, mode)?)?;
        let d = tape.relu(&self.bn2.forward(tape, &self.conv2.forward(tape, &h)?, mode)?)?;
        Ok((h, d))
    }
}

struct Encoder {
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Encoder {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for &cout in widths {
            blocks.push(EncoderBlock::init(rng, cin, cout));
            cin = cout;
        }
        Encoder { blocks }
    }

    fn check_input(&self, op: &'static str, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let need = 1usize << self.blocks.len();
        if s.len() != 4 || s[1] != 3 {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!("need [B,3,H,W], got {s:?}"),
            });
        }
        if s[2] % need != 0 || s[3] % need != 0 || s[2] == 0 || s[3] == 0 {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!(
                    "spatial size {}x{} must be divisible by {need} ({} downsampling blocks)",
                    s[2],
                    s[3],
                    self.blocks.len()
                ),
            });
        }
        Ok(())
    }

    fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let (skip, down) = block.forward(tape, &cur, mode)?;
            skips.push(skip);
            cur = down;
        }
        Ok((skips, cur))
    }

    fn collect(&self, prefix: &str, params: &mut Vec<(String, Tensor)>, buffers: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.b{i}");
            params.push((format!("{p}.conv1.weight"), b.conv1.weight.clone()));
            params.push((format!("{p}.bn1.gamma"), b.bn1.gamma.clone()));
            params.push((format!("{p}.bn1.beta"), b.bn1.beta.clone()));
            params.push((format!("{p}.conv2.weight"), b.conv2.weight.clone()));
            params.push((format!("{p}.bn2.gamma"), b.bn2.gamma.clone()));
            params.push((format!("{p}.bn2.beta"), b.bn2.beta.clone()));
            buffers.push((format!("{p}.bn1.running_mean"), b.bn1.running_mean.clone()));
            buffers.push((format!("{p}.bn1.running_var"), b.bn1.running_var.clone()));
            buffers.push((format!("{p}.bn2.running_mean"), b.bn2.running_mean.clone()));
            buffers.push((format!("{p}.bn2.running_var"), b.bn2.running_var.clone()));
        }
    }
}

/// Shared plumbing over the named parameter/buffer lists.
pub trait Network {
    fn collect(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>);

    /// Trainable tensors in a stable order (for the optimizer).
    fn trainable_params(&self) -> Vec<Tensor> {
        self.collect().0.into_iter().map(|(_, t)| t).collect()
    }

    fn set_trainable(&self, flag: bool) {
        for (_, t) in self.collect().0 {
            t.set_requires_grad(flag);
            if !flag {
                t.clear_grad();
            }
        }
    }

    fn is_frozen(&self) -> bool {
        self.collect().0.iter().all(|(_, t)| !t.requires_grad())
    }

    /// Parameters and running buffers as one store.
    fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        let (params, buffers) = self.collect();
        for (name, t) in params.iter().chain(buffers.iter()) {
            store.insert_tensor(name, t);
        }
        store
    }

    fn load_store(&self, store: &ParamStore) -> Result<()> {
        let (params, buffers) = self.collect();
        for (name, t) in params.iter().chain(buffers.iter()) {
            store.load_into(name, t)?;
        }
        Ok(())
    }
}

/// Image classifier: encoder, global average pooling, one linear head.
pub struct Classifier {
    encoder: Encoder,
    head: Linear,
    pub num_classes: usize,
}

impl Classifier {
    pub fn init(widths: &[usize], num_classes: usize, seed: u64) -> Classifier {
        assert!(num_classes >= 2, "need at least two classes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&mut rng, widths);
        let head = Linear::init(&mut rng, *widths.last().expect("nonempty widths"), num_classes);
        Classifier { encoder, head, num_classes }
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.encoder.check_input("classifier_forward", images)?;
        let (_, bottom) = self.encoder.forward(tape, images, mode)?;
        let pooled = tape.global_avg_pool(&bottom)?;
        self.head.forward(tape, &pooled)
    }
}

impl Network for Classifier {
    fn collect(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.encoder.collect("enc", &mut params, &mut buffers);
        params.push(("head.weight".into(), self.head.weight.clone()));
        params.push(("head.bias".into(), self.head.bias.clone()));
        (params, buffers)
    }
}

/// Siamese embedder: the classifier encoder with a linear projection to the
/// embedding space instead of a class head.
pub struct Embedder {
    encoder: Encoder,
    proj: Linear,
    pub dim: usize,
}

impl Embedder {
    pub fn init(widths: &[usize], dim: usize, seed: u64) -> Embedder {
        assert!(dim >= 2, "embedding dimension must be at least 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&mut rng, widths);
        let proj = Linear::init(&mut rng, *widths.last().expect("nonempty widths"), dim);
        Embedder { encoder, proj, dim }
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.encoder.check_input("embedder_forward", images)?;
        let (_, bottom) = self.encoder.forward(tape, images, mode)?;
        let pooled = tape.global_avg_pool(&bottom)?;
        self.proj.forward(tape, &pooled)
    }
}

impl Network for Embedder {
    fn collect(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.encoder.collect("enc", &mut params, &mut buffers);
        params.push(("proj.weight".into(), self.proj.weight.clone()));
        params.push(("proj.bias".into(), self.proj.bias.clone()));
        (params, buffers)
    }
}

struct DecoderBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    bn: BatchNorm2d,
    sigmoid: bool,
}

impl DecoderBlock {
    fn init(rng: &mut ChaCha8Rng, cin: usize, mid: usize, cout: usize, sigmoid: bool) -> DecoderBlock {
        DecoderBlock {
            conv1: Conv2d::init(rng, cin, mid, 1),
            conv2: Conv2d::init(rng, mid, cout, 1),
            bn: BatchNorm2d::init(cout),
            sigmoid,
        }
    }

    /// upsample 2x, concat the same-resolution encoder feature, two convs
    /// with batch norm after the last one, then the block activation.
    fn forward(&self, tape: &Tape, x: &Tensor, skip: &Tensor, mode: Mode) -> Result<Tensor> {
        let up = tape.nearest_upsample_2x(x)?;
        let cat = tape.concat_channels(&[&up, skip])?;
        let h = tape.relu(&self.conv1.forward(tape, &cat)?)?;
        let pre = self.bn.forward(tape, &self.conv2.forward(tape, &h)?, mode)?;
        if self.sigmoid {
            tape.sigmoid(&pre)
        } else {
            tape.relu(&pre)
        }
    }
}

/// Weight-map generator: shared-architecture encoder plus mirrored
/// upsampling decoder with per-resolution skip connections and a 1-channel
/// sigmoid output at input resolution.
pub struct Generator {
    encoder: Encoder,
    decoder: Vec<DecoderBlock>,
}

impl Generator {
    pub fn init(widths: &[usize], seed: u64) -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&mut rng, widths);
        let n = widths.len();
        let mut decoder = Vec::with_capacity(n);
        let mut prev = widths[n - 1];
        for i in 0..n {
            let skip_idx = n - 1 - i;
            let cin = prev + widths[skip_idx];
            let final_block = i == n - 1;
            let mid = if skip_idx == 0 { widths[0] } else { widths[skip_idx - 1] };
            let cout = if final_block { 1 } else { mid };
            decoder.push(DecoderBlock::init(&mut rng, cin, mid, cout, final_block));
            prev = cout;
        }
        Generator { encoder, decoder }
    }

    pub fn num_blocks(&self) -> usize {
        self.encoder.blocks.len()
    }

    /// Masks in (0,1), shape [B,1,H,W] matching the input spatial size.
    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.encoder.check_input("generator_forward", images)?;
        let (skips, bottom) = self.encoder.forward(tape, images, mode)?;
        let mut cur = bottom;
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = &skips[skips.len() - 1 - i];
            cur = block.forward(tape, &cur, skip, mode)?;
        }
        Ok(cur)
    }
}

impl Network for Generator {
    fn collect(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.encoder.collect("enc", &mut params, &mut buffers);
        for (i, b) in self.decoder.iter().enumerate() {
            let p = format!("dec.b{i}");
            params.push((format!("{p}.conv1.weight"), b.conv1.weight.clone()));
            params.push((format!("{p}.conv2.weight"), b.conv2.weight.clone()));
            params.push((format!("{p}.bn.gamma"), b.bn.gamma.clone()));
            params.push((format!("{p}.bn.beta"), b.bn.beta.clone()));
            buffers.push((format!("{p}.bn.running_mean"), b.bn.running_mean.clone()));
            buffers.push((format!("{p}.bn.running_var"), b.bn.running_var.clone()));
        }
        (params, buffers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(b: usize, hw: usize, seed: u64) -> Tensor {
        let mut s = seed | 1;
        let values: Vec<f64> = (0..b * 3 * hw * hw)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::new(&[b, 3, hw, hw], values).unwrap()
    }

    #[test]
    fn classifier_shapes_and_zero_head() {
        let net = Classifier::init(&[8, 16], 4, 3);
        let tape = Tape::new();
        let x = image(2, 16, 9);
        let logits = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), vec![2, 4]);
        // zero head: uniform prediction regardless of input
        net.head.weight.set_values(&vec![0.0; net.head.weight.numel()]);
        net.head.bias.set_values(&vec![0.0; net.head.bias.numel()]);
        let logits = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert!(logits.to_vec().iter().all(|v| *v == 0.0));
        let probs = crate::diffcore::softmax_rows(&logits.to_vec(), 2, 4);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn indivisible_spatial_size_is_rejected_with_divisor() {
        let net = Classifier::init(&[8, 16, 32], 4, 3);
        let tape = Tape::new();
        let x = image(1, 20, 9); // 20 % 8 != 0
        let err = net.forward(&tape, &x, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Classifier::init(&[8, 16], 3, 11);
        let x = image(1, 16, 42);
        let a = net.forward(&Tape::new(), &x, Mode::Eval).unwrap().to_vec();
        let b = net.forward(&Tape::new(), &x, Mode::Eval).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn embedder_shapes_zero_projection_determinism() {
        let net = Embedder::init(&[8, 16], 32, 5);
        let tape = Tape::new();
        let x = image(3, 16, 7);
        let z = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(z.shape(), vec![3, 32]);
        net.proj.weight.set_values(&vec![0.0; net.proj.weight.numel()]);
        net.proj.bias.set_values(&vec![0.0; net.proj.bias.numel()]);
        let z = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert!(z.to_vec().iter().all(|v| *v == 0.0));
        let z2 = net.forward(&Tape::new(), &x, Mode::Eval).unwrap();
        assert_eq!(z.to_vec(), z2.to_vec());
    }

    #[test]
    fn generator_output_shape_and_open_interval() {
        let net = Generator::init(&[8, 16, 32], 13);
        let tape = Tape::new();
        let x = image(2, 64, 3);
        let m = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(m.shape(), vec![2, 1, 64, 64]);
        assert!(m.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn generator_zero_final_weights_gives_constant_half() {
        let net = Generator::init(&[8, 16], 13);
        let last = net.decoder.last().unwrap();
        last.conv2.weight.set_values(&vec![0.0; last.conv2.weight.numel()]);
        let tape = Tape::new();
        let x = image(1, 16, 3);
        let m = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert!(m.to_vec().iter().all(|v| (*v - 0.5).abs() < 1e-12), "mask is sigmoid(beta)=0.5");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Classifier::init(&[8, 16], 4, 77).to_store().to_bytes();
        let b = Classifier::init(&[8, 16], 4, 77).to_store().to_bytes();
        assert_eq!(a, b);
        let c = Classifier::init(&[8, 16], 4, 78).to_store().to_bytes();
        assert_ne!(a, c);
        // batch norm scales start at exactly 1
        let net = Generator::init(&[8, 16], 1);
        for (name, t) in net.collect().0 {
            if name.ends_with("gamma") {
                assert!(t.to_vec().iter().all(|v| *v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn all_ones_mask_is_identity_for_classifier() {
        let net = Classifier::init(&[8, 16], 4, 21);
        let tape = Tape::new();
        let x = image(2, 16, 33);
        let ones = Tensor::full(&[2, 1, 16, 16], 1.0);
        let masked = tape.elementwise_mul(&x, &ones).unwrap();
        assert_eq!(masked.to_vec(), x.to_vec(), "I * 1 is bit-exact");
        let a = net.forward(&tape, &x, Mode::Eval).unwrap().to_vec();
        let b = net.forward(&tape, &masked, Mode::Eval).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn store_roundtrip_restores_forward() {
        let net = Embedder::init(&[8, 16], 8, 5);
        let x = image(1, 16, 2);
        let before = net.forward(&Tape::new(), &x, Mode::Eval).unwrap().to_vec();
        let store = net.to_store();
        let other = Embedder::init(&[8, 16], 8, 999);
        other.load_store(&store).unwrap();
        let after = other.forward(&Tape::new(), &x, Mode::Eval).unwrap().to_vec();
        assert_eq!(before, after);
        // shape mismatch across architectures is an error
        let wrong = Embedder::init(&[8, 32], 8, 1);
        assert!(wrong.load_store(&store).is_err());
    }

    #[test]
    fn set_trainable_toggles_all_params() {
        let net = Classifier::init(&[8, 16], 4, 3);
        net.set_trainable(false);
        assert!(net.is_frozen());
        net.set_trainable(true);
        assert!(!net.is_frozen());
        assert!(net.collect().0.iter().all(|(_, t)| t.requires_grad()));
    }
}
