//! Decoder-style transformer stack: pre-RMSNorm blocks with rotary
//! positions, multi-head attention and a SiLU-gated feed-forward network.
//!
//! The same stack runs causally inside the language model and with a full
//! attention mask inside the speech encoder. It never contains a token
//! embedding or vocabulary projection; those belong to the language model,
//! which makes moving a stack from one model to the other a plain weight copy.

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::nn::{init_ones, init_weight, Module};
use crate::rng::{Rng, Seed};
use crate::tensor::{MaskMode, Real, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub d_ff: usize,
    pub n_layer: usize,
    pub dropout: f64,
    pub rope_base: f64,
    pub mask_mode: MaskMode,
}

impl BlockConfig {
    pub fn small() -> Self {
        Self {
            d_model: 128,
            n_head: 4,
            d_ff: 352,
            n_layer: 4,
            dropout: 0.1,
            rope_base: 10000.0,
            mask_mode: MaskMode::Causal,
        }
    }

    pub fn large() -> Self {
        Self {
            d_model: 192,
            n_head: 6,
            d_ff: 512,
            n_layer: 8,
            ..Self::small()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 {
            return Err(PalError::Config("transformer stack needs at least one layer".into()));
        }
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            return Err(PalError::Config(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(PalError::Config(format!("head dimension {} must be even for rotary positions", self.d_head())));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PalError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 || self.rope_base <= 0.0 {
            return Err(PalError::Config("d_ff and rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names of a stack with this shape under `prefix`, in the
    /// order [`TransformerStack::named_parameters`] yields them.
    pub fn parameter_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        for i in 0..self.n_layer {
            let p = format!("{prefix}.layer{i}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.gate"), vec![d, f]));
            out.push((format!("{p}.ffn.up"), vec![d, f]));
            out.push((format!("{p}.ffn.down"), vec![f, d]));
        }
        out.push((format!("{prefix}.final_norm"), vec![d]));
        out
    }
}

#[derive(Debug, Clone)]
pub struct Block<F: Real> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

impl<F: Real> Block<F> {
    fn random(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            attn_norm: init_ones(&[d]),
            wq: init_weight(rng, &[d, d]),
            wk: init_weight(rng, &[d, d]),
            wv: init_weight(rng, &[d, d]),
            wo: init_weight(rng, &[d, d]),
            ffn_norm: init_ones(&[d]),
            w_gate: init_weight(rng, &[d, f]),
            w_up: init_weight(rng, &[d, f]),
            w_down: init_weight(rng, &[f, d]),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    /// Attention sub-layer output (before the residual add).
    pub fn attend(&self, x: &Tensor<F>, cfg: &BlockConfig, mask: MaskMode, positions: &[usize]) -> Result<Tensor<F>> {
        let h = x.rmsnorm(&self.attn_norm, RMS_EPS)?;
        let q = h.matmul(&self.wq)?.rope(cfg.n_head, positions, cfg.rope_base)?;
        let k = h.matmul(&self.wk)?.rope(cfg.n_head, positions, cfg.rope_base)?;
        let v = h.matmul(&self.wv)?;
        Tensor::attention(&q, &k, &v, cfg.n_head, mask)?.matmul(&self.wo)
    }

    pub fn feed_forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = x.rmsnorm(&self.ffn_norm, RMS_EPS)?;
        let gate = h.matmul(&self.w_gate)?.silu();
        let up = h.matmul(&self.w_up)?;
        gate.mul(&up)?.matmul(&self.w_down)
    }

    /// `x + Attn(norm(x))`, then `+ FFN(norm(·))`. Dropout hits each residual
    /// branch in training mode.
    pub fn forward(
        &self,
        x: &Tensor<F>,
        cfg: &BlockConfig,
        mask: MaskMode,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Tensor<F>> {
        let positions: Vec<usize> = (0..x.shape()[0]).collect();
        let a = self.attend(x, cfg, mask, &positions)?.dropout(cfg.dropout, train, rng)?;
        let x = x.add(&a)?;
        let f = self.feed_forward(&x)?.dropout(cfg.dropout, train, rng)?;
        x.add(&f)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack<F: Real> {
    pub config: BlockConfig,
    pub blocks: Vec<Block<F>>,
    pub final_norm: Tensor<F>,
}

impl<F: Real> TransformerStack<F> {
    /// Fresh stack: weights ~ truncated N(0, 0.02²), norm gains one.
    pub fn random(config: BlockConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let blocks = (0..config.n_layer).map(|_| Block::random(&config, &mut rng)).collect();
        Ok(Self {
            final_norm: init_ones(&[config.d_model]),
            config,
            blocks,
        })
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.config.mask_mode
    }

    /// Switches the attention regime. Touches no parameter.
    pub fn set_mask_mode(&mut self, mode: MaskMode) {
        self.config.mask_mode = mode;
    }

    /// Runs every block and the final norm. Input and output are T×d_model.
    pub fn forward(&self, x: &Tensor<F>, train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        if x.rank() != 2 || x.shape()[1] != self.config.d_model {
            return Err(PalError::Dimension(format!(
                "stack expects T×{}, got {:?}",
                self.config.d_model,
                x.shape()
            )));
        }
        if x.shape()[0] == 0 {
            return Err(PalError::Input("stack input has no frames".into()));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, &self.config, self.config.mask_mode, train, rng)?;
        }
        h.rmsnorm(&self.final_norm, RMS_EPS)
    }

    pub fn named_parameters_with(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        let names = self.config.parameter_shapes(prefix);
        let tensors = self
            .blocks
            .iter()
            .flat_map(|b| b.tensors())
            .chain(std::iter::once(&self.final_norm));
        names.into_iter().map(|(n, _)| n).zip(tensors.cloned()).collect()
    }

    pub fn set_trainable(&self, flag: bool) {
        for (_, t) in self.named_parameters() {
            t.set_requires_grad(flag);
        }
    }
}

impl<F: Real> Module<F> for TransformerStack<F> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)> {
        self.named_parameters_with("stack")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::Rng as _;

    fn tiny(mask: MaskMode) -> BlockConfig {
        BlockConfig {
            d_model: 8,
            n_head: 2,
            d_ff: 12,
            n_layer: 2,
            dropout: 0.0,
            rope_base: 10000.0,
            mask_mode: mask,
        }
    }

    fn input(seed: u64, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = Seed(seed).rng();
        Tensor::new((0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[t, d]).unwrap()
    }

    /// Scales weights up so attention is far from uniform in probes.
    fn sharpen(stack: &TransformerStack<f64>) {
        for (n, t) in stack.named_parameters() {
            if !n.ends_with("norm") {
                t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(MaskMode::Full);
        c.n_layer = 0;
        assert!(matches!(TransformerStack::<f64>::random(c, Seed(0)), Err(PalError::Config(_))));
        let mut c = tiny(MaskMode::Full);
        c.n_head = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(MaskMode::Full);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(BlockConfig::small().validate().is_ok());
        assert!(BlockConfig::large().validate().is_ok());
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let stack = TransformerStack::<f64>::random(tiny(MaskMode::Full), Seed(1)).unwrap();
        let mut rng = Seed(2).rng();
        for t in [1, 5, 17] {
            let x = input(t as u64, t, 8);
            let a = stack.blocks[0].forward(&x, &stack.config, MaskMode::Full, false, &mut rng).unwrap();
            let b = stack.blocks[0].forward(&x, &stack.config, MaskMode::Full, false, &mut rng).unwrap();
            assert_eq!(a.shape(), &[t, 8]);
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn zero_output_projections_make_identity_block() {
        let stack = TransformerStack::<f64>::random(tiny(MaskMode::Full), Seed(3)).unwrap();
        let b = &stack.blocks[0];
        b.wo.data_mut().iter_mut().for_each(|v| *v = 0.0);
        b.w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = input(4, 6, 8);
        let y = b.forward(&x, &stack.config, MaskMode::Full, false, &mut Seed(0).rng()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn single_position_attention_is_projected_value() {
        let stack = TransformerStack::<f64>::random(tiny(MaskMode::Full), Seed(5)).unwrap();
        sharpen(&stack);
        let b = &stack.blocks[0];
        let x = input(6, 1, 8);
        let expect = x
            .rmsnorm(&b.attn_norm, RMS_EPS)
            .unwrap()
            .matmul(&b.wv)
            .unwrap()
            .matmul(&b.wo)
            .unwrap()
            .to_vec();
        for mask in [MaskMode::Causal, MaskMode::Full] {
            let got = b.attend(&x, &stack.config, mask, &[0]).unwrap().to_vec();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masks_agree_at_length_one() {
        let mut stack = TransformerStack::<f64>::random(tiny(MaskMode::Full), Seed(7)).unwrap();
        let x = input(8, 1, 8);
        let mut rng = Seed(0).rng();
        let full = stack.forward(&x, false, &mut rng).unwrap().to_vec();
        stack.set_mask_mode(MaskMode::Causal);
        let causal = stack.forward(&x, false, &mut rng).unwrap().to_vec();
        assert_eq!(full, causal);
    }

    #[test]
    fn causal_prefix_is_untouched_by_later_frames() {
        let stack = TransformerStack::<f64>::random(tiny(MaskMode::Causal), Seed(9)).unwrap();
        sharpen(&stack);
        let mut rng = Seed(0).rng();
        let x = input(10, 7, 8);
        let base = stack.forward(&x, false, &mut rng).unwrap().to_vec();
        let t = 4;
        let mut pert = x.to_vec();
        for v in &mut pert[t * 8..(t + 1) * 8] {
            *v += 0.5;
        }
        let y = stack.forward(&Tensor::new(pert, &[7, 8]).unwrap(), false, &mut rng).unwrap().to_vec();
        assert_eq!(&base[..t * 8], &y[..t * 8]);
        assert_ne!(&base[t * 8..], &y[t * 8..]);
    }

    #[test]
    fn two_layer_stack_gradients() {
        let stack = TransformerStack::<f64>::random(tiny(MaskMode::Full), Seed(11)).unwrap();
        sharpen(&stack);
        let x = input(12, 5, 8);
        x.set_requires_grad(true);
        let head = input(13, 5, 8);
        let mut params = vec![x.clone()];
        params.extend(stack.parameters());
        let f = || {
            let mut rng = Seed(0).rng();
            Ok(stack.forward(&x, false, &mut rng)?.mul(&head)?.sum())
        };
        let (err, idx) = grad_check_many(f, &params, 1e-5).unwrap();
        assert!(err < 1e-3, "worst {err} at tensor {idx}");
    }

    #[test]
    fn names_are_canonical() {
        let stack = TransformerStack::<f32>::random(tiny(MaskMode::Full), Seed(0)).unwrap();
        let names: Vec<String> = stack.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "stack.layer0.attn_norm");
        assert!(names.contains(&"stack.layer1.ffn.gate".to_string()));
        assert_eq!(names.last().unwrap(), "stack.final_norm");
        assert_eq!(names.len(), 2 * 9 + 1);
        for ((n, t), (n2, s)) in stack.named_parameters().iter().zip(stack.config.parameter_shapes("stack")) {
            assert_eq!(n, &n2);
            assert_eq!(t.shape(), s.as_slice());
        }
    }
}
