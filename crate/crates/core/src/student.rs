//! The student: tubelet tokenizer, masked SSM encoder, mask-token decoder,
//! patch reconstruction head and rPPG regression head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::VisibilityMask;
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{MambaBlock, NORM_EPS};
use crate::tensor::{Graph, Real, RngStream, Tensor, Var};
use crate::video::TubeletConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub tubelet: TubeletConfig,
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    /// SSM state size per channel.
    pub state: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            tubelet: TubeletConfig::default(),
            embed_dim: 64,
            encoder_blocks: 4,
            decoder_dim: 32,
            decoder_blocks: 2,
            state: 8,
            mlp_hidden: 128,
            dropout: 0.1,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        self.tubelet.validate()?;
        if self.embed_dim == 0 || self.decoder_dim == 0 || self.state == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("student widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Interleaved sine/cosine table `[n, d]` over positions `0..n`.
pub fn sinusoidal_table<F: Real>(n: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        F::c(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

/// Outputs of a masked pretraining forward pass.
pub struct PretrainOutput<'g, F: Real> {
    /// `[B, N-K, P]` predictions for the masked patches.
    pub reconstruction: Var<'g, F>,
    /// `[B, N-K, P]` pixel targets (constant).
    pub target: Var<'g, F>,
    /// `[B, T]` predicted waveform.
    pub waveform: Var<'g, F>,
}

/// Parameter handles of the student; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: StudentConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub encoder: Vec<MambaBlock>,
    pub enc_norm: (ParamId, ParamId),
    pub enc_to_dec_w: ParamId,
    pub enc_to_dec_b: ParamId,
    pub mask_token: ParamId,
    pub decoder: Vec<MambaBlock>,
    pub dec_norm: (ParamId, ParamId),
    pub recon_w: ParamId,
    pub recon_b: ParamId,
    /// Maps the decoder-width mask token to encoder width for pooling.
    pub mask_to_enc_w: ParamId,
    pub mask_to_enc_b: ParamId,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

impl Student {
    pub fn init<F: Real>(cfg: &StudentConfig, store: &mut ParamStore<F>, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (d, dd, p) = (cfg.embed_dim, cfg.decoder_dim, cfg.tubelet.patch_len());
        let patch_w = store.add_linear("student.patch.w", p, d, rng);
        let patch_b = store.add_bias("student.patch.b", d);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| MambaBlock::init(store, &format!("student.enc.{i}"), d, d, cfg.state, rng))
            .collect();
        let enc_norm = store.add_norm("student.enc.norm", d);
        let enc_to_dec_w = store.add_linear("student.enc_to_dec.w", d, dd, rng);
        let enc_to_dec_b = store.add_bias("student.enc_to_dec.b", dd);
        let mask_token = store.add(
            "student.mask_token",
            Tensor::from_fn(&[dd], |_| F::c(0.02 * rng.normal())),
            crate::params::ParamRole::Embedding,
        );
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| MambaBlock::init(store, &format!("student.dec.{i}"), dd, dd, cfg.state, rng))
            .collect();
        let dec_norm = store.add_norm("student.dec.norm", dd);
        let recon_w = store.add_linear("student.recon.w", dd, p, rng);
        let recon_b = store.add_bias("student.recon.b", p);
        let mask_to_enc_w = store.add_linear("student.mask_to_enc.w", dd, d, rng);
        let mask_to_enc_b = store.add_bias("student.mask_to_enc.b", d);
        let head_w1 = store.add_linear("student.head.w1", d, cfg.mlp_hidden, rng);
        let head_b1 = store.add_bias("student.head.b1", cfg.mlp_hidden);
        let head_w2 = store.add_linear("student.head.w2", cfg.mlp_hidden, cfg.tubelet.frames, rng);
        let head_b2 = store.add_bias("student.head.b2", cfg.tubelet.frames);
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            encoder,
            enc_norm,
            enc_to_dec_w,
            enc_to_dec_b,
            mask_token,
            decoder,
            dec_norm,
            recon_w,
            recon_b,
            mask_to_enc_w,
            mask_to_enc_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    fn tokens(&self) -> usize {
        self.cfg.tubelet.tokens()
    }

    fn check_patches<F: Real>(&self, patches: Var<'_, F>) -> Result<()> {
        let s = patches.shape();
        let want = [self.tokens(), self.cfg.tubelet.patch_len()];
        if s.len() != 3 || s[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "student::tokenize",
                lhs: s,
                rhs: vec![0, want[0], want[1]],
            });
        }
        Ok(())
    }

    fn check_mask<F: Real>(&self, x: Var<'_, F>, mask: &VisibilityMask) -> Result<()> {
        let s = x.shape();
        if mask.tokens() != self.tokens() || mask.batch() != s[0] {
            return Err(Error::invalid(format!(
                "mask covers {}x{} tokens, batch is {:?} with {} tokens",
                mask.batch(),
                mask.tokens(),
                s,
                self.tokens()
            )));
        }
        Ok(())
    }

    /// Patches `[B, N, P]` → token embeddings `[B, N, D]` with positions added.
    pub fn tokenize<'g, F: Real>(&self, p: &Bound<'g, F>, patches: Var<'g, F>) -> Result<Var<'g, F>> {
        self.check_patches(patches)?;
        let g = patches.graph();
        let pos = g.constant(sinusoidal_table(self.tokens(), self.cfg.embed_dim));
        patches.matmul(p[self.patch_w])?.add(p[self.patch_b])?.add(pos)
    }

    /// Runs the encoder over the visible tokens only, returning `[B, K, D]`.
    pub fn encode<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        tokens: Var<'g, F>,
        mask: &VisibilityMask,
    ) -> Result<Var<'g, F>> {
        self.check_mask(tokens, mask)?;
        let mut h = if mask.masked_per_sample() == 0 {
            tokens
        } else {
            tokens.gather_rows(mask.visible())?
        };
        for block in &self.encoder {
            h = block.forward(p, h)?;
        }
        h.layer_norm(2, p[self.enc_norm.0], p[self.enc_norm.1], NORM_EPS)
    }

    /// Decodes visible embeddings and predicts the masked patches `[B, N-K, P]`.
    pub fn decode_and_reconstruct<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        visible: Var<'g, F>,
        mask: &VisibilityMask,
    ) -> Result<Var<'g, F>> {
        self.check_mask(visible, mask)?;
        let (b, n, dd) = (mask.batch(), self.tokens(), self.cfg.decoder_dim);
        let g = visible.graph();
        let vis = visible.matmul(p[self.enc_to_dec_w])?.add(p[self.enc_to_dec_b])?;
        let base = p[self.mask_token].broadcast_to(&[b, n, dd])?;
        let full = base.scatter_rows(vis, mask.visible())?;
        let mut h = full.add(g.constant(sinusoidal_table(n, dd)))?;
        for block in &self.decoder {
            h = block.forward(p, h)?;
        }
        let h = h.layer_norm(2, p[self.dec_norm.0], p[self.dec_norm.1], NORM_EPS)?;
        h.gather_rows(mask.masked())?
            .matmul(p[self.recon_w])?
            .add(p[self.recon_b])
    }

    /// Visible embeddings scattered into a full `[B, N, D]` sequence, with the
    /// projected mask token at masked positions.
    pub fn assemble<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        visible: Var<'g, F>,
        mask: &VisibilityMask,
    ) -> Result<Var<'g, F>> {
        if mask.masked_per_sample() == 0 {
            return Ok(visible);
        }
        let (b, n, d) = (mask.batch(), self.tokens(), self.cfg.embed_dim);
        let filler = p[self.mask_token]
            .reshape(&[1, self.cfg.decoder_dim])?
            .matmul(p[self.mask_to_enc_w])?
            .add(p[self.mask_to_enc_b])?
            .broadcast_to(&[b, n, d])?;
        filler.scatter_rows(visible, mask.visible())
    }

    /// Mean-pools `[B, N, D]` embeddings and regresses a `[B, T]` waveform.
    pub fn rppg_head<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        tokens: Var<'g, F>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var<'g, F>> {
        tokens
            .mean_axes(&[1], false)?
            .matmul(p[self.head_w1])?
            .add(p[self.head_b1])?
            .silu()
            .dropout(self.cfg.dropout, rng, training)?
            .matmul(p[self.head_w2])?
            .add(p[self.head_b2])
    }

    /// Masked forward pass used during pretraining.
    pub fn forward_pretrain<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        patches: Var<'g, F>,
        mask: &VisibilityMask,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<PretrainOutput<'g, F>> {
        let tokens = self.tokenize(p, patches)?;
        let visible = self.encode(p, tokens, mask)?;
        let reconstruction = self.decode_and_reconstruct(p, visible, mask)?;
        let target = patches.detach().gather_rows(mask.masked())?;
        let full = self.assemble(p, visible, mask)?;
        let waveform = self.rppg_head(p, full, rng, training)?;
        Ok(PretrainOutput {
            reconstruction,
            target,
            waveform,
        })
    }

    /// Unmasked forward pass: every token is encoded, then the rPPG head runs.
    pub fn forward_full<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        patches: Var<'g, F>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var<'g, F>> {
        let b = patches.shape()[0];
        let mask = VisibilityMask::all_visible(b, self.tokens());
        let tokens = self.tokenize(p, patches)?;
        let visible = self.encode(p, tokens, &mask)?;
        self.rppg_head(p, visible, rng, training)
    }

    /// Inference convenience: waveform values for a patch tensor.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let g = Graph::new();
        let p = store.bind_where(&g, |_| false);
        let mut rng = RngStream::new(0, 0);
        let y = self.forward_full(&p, g.constant(patches.clone()), &mut rng, false)?;
        Ok((*y.value()).clone())
    }

    /// Names of parameters used only by masked reconstruction.
    pub fn decoder_prefixes() -> &'static [&'static str] {
        &[
            "student.enc_to_dec.",
            "student.dec.",
            "student.recon.",
            "student.mask_token",
            "student.mask_to_enc.",
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> StudentConfig {
        StudentConfig {
            tubelet: TubeletConfig {
                t: 2,
                h: 2,
                w: 2,
                channels: 1,
                frames: 8,
                height: 4,
                width: 4,
            },
            embed_dim: 8,
            encoder_blocks: 2,
            decoder_dim: 4,
            decoder_blocks: 1,
            state: 2,
            mlp_hidden: 6,
            dropout: 0.1,
        }
    }

    fn build() -> (Student, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, 0);
        let s = Student::init(&tiny(), &mut store, &mut rng).unwrap();
        (s, store)
    }

    #[test]
    fn zero_video_gives_positions() {
        let (s, store) = build();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(&[1, 16, 8]));
        let t = s.tokenize(&p, x).unwrap().value();
        let pos: Tensor<f64> = sinusoidal_table(16, 8);
        assert_eq!(t.data(), pos.data());
    }

    #[test]
    fn shapes() {
        let (s, store) = build();
        let g = Graph::new();
        let p = store.bind(&g);
        let mut rng = RngStream::new(0, 0);
        let x = g.constant(Tensor::from_fn(&[2, 16, 8], |i| ((i % 7) as f64) / 7.0));
        let mask = VisibilityMask::from_visible(16, vec![vec![0, 3, 5, 9], vec![1, 2, 14, 15]]).unwrap();
        let out = s.forward_pretrain(&p, x, &mask, &mut rng, true).unwrap();
        assert_eq!(out.reconstruction.shape(), vec![2, 12, 8]);
        assert_eq!(out.target.shape(), vec![2, 12, 8]);
        assert_eq!(out.waveform.shape(), vec![2, 8]);
    }

    #[test]
    fn zeroed_decoder_outputs_bias() {
        let (s, mut store) = build();
        for id in store.ids_with_prefix(&["student.recon.w"]) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let bias = Tensor::from_fn(&[8], |i| i as f64 * 0.5);
        *store.get_mut(s.recon_b) = bias.clone();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::from_fn(&[1, 16, 8], |i| (i as f64).sin()));
        let mask = VisibilityMask::from_visible(16, vec![vec![2, 7, 8, 11]]).unwrap();
        let tokens = s.tokenize(&p, x).unwrap();
        let vis = s.encode(&p, tokens, &mask).unwrap();
        let rec = s.decode_and_reconstruct(&p, vis, &mask).unwrap().value();
        for row in rec.data().chunks(8) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let (s, store) = build();
        let x = Tensor::from_fn(&[2, 16, 8], |i| ((i * 31 % 17) as f64) / 17.0);
        assert_eq!(s.predict(&store, &x).unwrap(), s.predict(&store, &x).unwrap());
    }

    #[test]
    fn masked_content_does_not_reach_encoder() {
        let (s, store) = build();
        let mask = VisibilityMask::from_visible(16, vec![vec![0, 1, 2, 3]]).unwrap();
        let run = |x: Tensor<f64>| {
            let g = Graph::new();
            let p = store.bind(&g);
            let t = s.tokenize(&p, g.constant(x)).unwrap();
            (*s.encode(&p, t, &mask).unwrap().value()).clone()
        };
        let a = Tensor::from_fn(&[1, 16, 8], |i| (i as f64 * 0.37).sin());
        let mut b = a.clone();
        // swap contents of masked tokens 5 and 12
        for k in 0..8 {
            b.data_mut().swap(5 * 8 + k, 12 * 8 + k);
        }
        assert_eq!(run(a), run(b));
    }
}
