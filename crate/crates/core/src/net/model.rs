use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    affinity_terms, embedding_grad, normalize_backward, AffinityTarget, AffinityTerms,
    EmbeddingMatrix,
};
use super::recurrent::{backprop_direction, run_direction, CellKind, CellParams, DirectionCache};
use crate::error::{Error, Result};

/// Topology of the embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub cell: CellKind,
    pub freq_bins: usize,
    /// Width of the flattened speaker block appended to every frame (`C * ivec_dim`), 0 if none.
    pub ivector_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embedding_dim: usize,
}

impl NetworkShape {
    pub fn input_width(&self) -> usize {
        self.freq_bins + self.ivector_width
    }

    pub fn output_width(&self) -> usize {
        self.freq_bins * self.embedding_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub forward: CellParams,
    pub backward: CellParams,
}

/// All trainable weights. Also used as the container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub shape: NetworkShape,
    pub layers: Vec<BiLayer>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl NetworkParameters {
    pub fn zeros(shape: NetworkShape) -> Self {
        let layers = (0..shape.layers)
            .map(|l| {
                let input = if l == 0 {
                    shape.input_width()
                } else {
                    2 * shape.hidden
                };
                BiLayer {
                    forward: CellParams::zeros(shape.cell, input, shape.hidden),
                    backward: CellParams::zeros(shape.cell, input, shape.hidden),
                }
            })
            .collect();
        Self {
            shape,
            layers,
            w_out: Array2::zeros((shape.output_width(), 2 * shape.hidden)),
            b_out: Array1::zeros(shape.output_width()),
        }
    }

    pub fn random(shape: NetworkShape, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let input = if l == 0 {
                shape.input_width()
            } else {
                2 * shape.hidden
            };
            layer.forward = CellParams::random(shape.cell, input, shape.hidden, rng);
            layer.backward = CellParams::random(shape.cell, input, shape.hidden, rng);
        }
        let bound = 1.0 / ((2 * shape.hidden) as f64).sqrt();
        p.w_out.mapv_inplace(|_| rng.random_range(-bound..bound));
        p.b_out.mapv_inplace(|_| rng.random_range(-bound..bound));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Named tensors in a fixed canonical order, with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir, cell) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                out.push((
                    format!("layer{l}.{dir}.w_in"),
                    cell.w_in.shape().to_vec(),
                    cell.w_in.as_slice().unwrap(),
                ));
                out.push((
                    format!("layer{l}.{dir}.w_rec"),
                    cell.w_rec.shape().to_vec(),
                    cell.w_rec.as_slice().unwrap(),
                ));
                out.push((
                    format!("layer{l}.{dir}.b_in"),
                    cell.b_in.shape().to_vec(),
                    cell.b_in.as_slice().unwrap(),
                ));
                out.push((
                    format!("layer{l}.{dir}.b_rec"),
                    cell.b_rec.shape().to_vec(),
                    cell.b_rec.as_slice().unwrap(),
                ));
            }
        }
        out.push((
            "out.w".into(),
            self.w_out.shape().to_vec(),
            self.w_out.as_slice().unwrap(),
        ));
        out.push((
            "out.b".into(),
            self.b_out.shape().to_vec(),
            self.b_out.as_slice().unwrap(),
        ));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.layers.iter_mut() {
            for cell in [&mut layer.forward, &mut layer.backward] {
                out.push(cell.w_in.as_slice_mut().unwrap());
                out.push(cell.w_rec.as_slice_mut().unwrap());
                out.push(cell.b_in.as_slice_mut().unwrap());
                out.push(cell.b_rec.as_slice_mut().unwrap());
            }
        }
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
        out
    }

    /// Visits every parameter slice of `self` together with the matching slice of `other`.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut [f64], &[f64])) {
        assert_eq!(self.shape, other.shape);
        let theirs: Vec<&[f64]> = other.tensors().into_iter().map(|(_, _, d)| d).collect();
        for (mine, theirs) in self.slices_mut().into_iter().zip(theirs) {
            f(mine, theirs);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for s in self.slices_mut() {
            f(s);
        }
    }

    /// Rebuilds parameters from named tensors as produced by [`NetworkParameters::tensors`].
    pub fn from_tensors(
        shape: NetworkShape,
        tensors: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let mut p = Self::zeros(shape);
        let expected: Vec<(String, Vec<usize>)> =
            p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Container(format!(
                "expected {} network tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (tname, tshape, _)) in expected.iter().zip(tensors) {
            if name != tname || shape != tshape {
                return Err(Error::Container(format!(
                    "tensor {tname} {tshape:?} does not match expected {name} {shape:?}"
                )));
            }
        }
        for (slot, (_, _, data)) in p.slices_mut().into_iter().zip(tensors) {
            slot.copy_from_slice(data);
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// Widens the speaker block to `ivector_width` inputs. New input columns start at zero, so
    /// the widened network computes exactly what this one does.
    pub fn with_ivector_inputs(&self, ivector_width: usize) -> Self {
        let mut shape = self.shape;
        shape.ivector_width = ivector_width;
        let mut p = self.clone();
        p.shape = shape;
        let keep = self.shape.freq_bins + self.shape.ivector_width.min(ivector_width);
        let first = &mut p.layers[0];
        for cell in [&mut first.forward, &mut first.backward] {
            let mut w = Array2::zeros((cell.w_in.nrows(), shape.input_width()));
            w.slice_mut(s![.., ..keep])
                .assign(&cell.w_in.slice(s![.., ..keep]));
            cell.w_in = w;
        }
        p
    }

    /// Assembles the per-frame network input: features, then the flattened speaker block.
    pub fn build_input(
        &self,
        features: ArrayView2<f64>,
        ivectors: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        if features.ncols() != self.shape.freq_bins {
            return Err(Error::DimensionMismatch(format!(
                "features have {} bins, network expects {}",
                features.ncols(),
                self.shape.freq_bins
            )));
        }
        let width = ivectors.map_or(0, |iv| iv.len());
        if width != self.shape.ivector_width {
            return Err(Error::DimensionMismatch(format!(
                "speaker block has width {width}, network expects {}",
                self.shape.ivector_width
            )));
        }
        match ivectors {
            None => Ok(features.to_owned()),
            Some(iv) => {
                let flat: Vec<f64> = iv.iter().cloned().collect();
                let block = Array2::from_shape_fn((features.nrows(), width), |(_, j)| flat[j]);
                Ok(concatenate(Axis(1), &[features, block.view()])
                    .expect("same row count")
                    .as_standard_layout()
                    .into_owned())
            }
        }
    }

    /// Unit-norm embeddings for every bin, row index `t * F + f`.
    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        ivectors: Option<&Array2<f64>>,
    ) -> Result<EmbeddingMatrix> {
        let x = self.build_input(features, ivectors)?;
        let pass = self.forward_pass(&x);
        Ok(EmbeddingMatrix::normalize(&pass.raw).0)
    }

    pub(crate) fn forward_pass(&self, x: &Array2<f64>) -> ForwardPass {
        let cell = self.shape.cell;
        let mut input = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (hf, cf) = run_direction(cell, &layer.forward, input.view(), false);
            let (hb, cb) = run_direction(cell, &layer.backward, input.view(), true);
            input = concatenate(Axis(1), &[hf.view(), hb.view()])
                .expect("same row count")
                .as_standard_layout()
                .into_owned();
            caches.push((cf, cb));
        }
        let out = input.dot(&self.w_out.t()) + &self.b_out;
        let frames = x.nrows();
        let raw = out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((frames * self.shape.freq_bins, self.shape.embedding_dim))
            .expect("standard layout");
        ForwardPass {
            top: input,
            caches,
            raw,
        }
    }

    /// Gradient of a loss w.r.t. every parameter, given its gradient w.r.t. the raw
    /// (pre-normalization) embeddings.
    pub(crate) fn backward(&self, pass: &ForwardPass, d_raw: Array2<f64>) -> NetworkParameters {
        let cell = self.shape.cell;
        let h = self.shape.hidden;
        let frames = pass.top.nrows();
        let d_out = d_raw
            .into_shape_with_order((frames, self.shape.output_width()))
            .expect("standard layout");
        let mut grads = self.zeros_like();
        grads.w_out = d_out.t().dot(&pass.top);
        grads.b_out = d_out.sum_axis(Axis(0));
        let mut d_top = d_out.dot(&self.w_out);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (cf, cb) = &pass.caches[l];
            let g = &mut grads.layers[l];
            let dxf = backprop_direction(
                cell,
                &layer.forward,
                cf,
                d_top.slice(s![.., ..h]),
                &mut g.forward,
            );
            let dxb = backprop_direction(
                cell,
                &layer.backward,
                cb,
                d_top.slice(s![.., h..]),
                &mut g.backward,
            );
            d_top = dxf + dxb;
        }
        grads
    }

    /// Affinity objective of one example and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        x: &Array2<f64>,
        targets: &AffinityTarget,
        keep: &[bool],
    ) -> Result<(AffinityTerms, NetworkParameters)> {
        let pass = self.forward_pass(x);
        let (v, norms) = EmbeddingMatrix::normalize(&pass.raw);
        let terms = affinity_terms(v.v.view(), targets, keep)?;
        let gv = embedding_grad(v.v.view(), &terms);
        let d_raw = normalize_backward(v.v.view(), &norms, &gv);
        Ok((terms, self.backward(&pass, d_raw)))
    }

    pub fn loss(
        &self,
        x: &Array2<f64>,
        targets: &AffinityTarget,
        keep: &[bool],
    ) -> Result<AffinityTerms> {
        let pass = self.forward_pass(x);
        let (v, _) = EmbeddingMatrix::normalize(&pass.raw);
        affinity_terms(v.v.view(), targets, keep)
    }
}

pub(crate) struct ForwardPass {
    top: Array2<f64>,
    caches: Vec<(DirectionCache, DirectionCache)>,
    pub(crate) raw: Array2<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(cell: CellKind, ivector_width: usize) -> NetworkShape {
        NetworkShape {
            cell,
            freq_bins: 4,
            ivector_width,
            hidden: 3,
            layers: 2,
            embedding_dim: 2,
        }
    }

    #[test]
    fn input_width_includes_speaker_block() {
        let s = NetworkShape {
            cell: CellKind::Gru,
            freq_bins: 256,
            ivector_width: 2 * 10,
            hidden: 8,
            layers: 2,
            embedding_dim: 20,
        };
        assert_eq!(s.input_width(), 276);
        assert_eq!(s.output_width(), 5120);
    }

    #[test]
    fn forward_is_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NetworkParameters::random(shape(CellKind::Gru, 2), &mut rng);
        let feats = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let iv = Array2::from_shape_fn((2, 1), |_| rng.random_range(-1.0..1.0));
        let a = p.forward(feats.view(), Some(&iv)).unwrap();
        let b = p.forward(feats.view(), Some(&iv)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v.dim(), (20, 2));
        for row in a.v.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-6);
        }
        assert!(p.forward(feats.view(), None).is_err());
        let wrong = Array2::zeros((5, 3));
        assert!(p.forward(wrong.view(), Some(&iv)).is_err());
    }

    #[test]
    fn widened_network_is_functionally_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NetworkParameters::random(shape(CellKind::Gru, 0), &mut rng);
        let wide = p.with_ivector_inputs(6);
        let feats = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let iv = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let a = p.forward(feats.view(), None).unwrap();
        let b = wide.forward(feats.view(), Some(&iv)).unwrap();
        assert_eq!(a, b);
    }

    fn gradient_check(cell: CellKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NetworkParameters::random(shape(cell, 2), &mut rng);
        let feats = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let iv = Array2::from_shape_fn((1, 2), |_| rng.random_range(-1.0..1.0));
        let x = p.build_input(feats.view(), Some(&iv)).unwrap();
        let labels = (0..16)
            .map(|i| {
                if i % 5 == 0 {
                    None
                } else {
                    Some(rng.random_range(0..2))
                }
            })
            .collect();
        let y = AffinityTarget::from_labels(labels, 2).unwrap();
        let keep = vec![true; 16];
        let (_, grads) = p.loss_and_grad(&x, &y, &keep).unwrap();
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|(_, _, d)| d.to_vec())
            .collect();
        let total = analytic.len();
        let h = 1e-6;
        for idx in (0..total).step_by(7) {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut seen = 0;
                q.for_each_mut(|s| {
                    if idx >= seen && idx < seen + s.len() {
                        s[idx - seen] += delta;
                    }
                    seen += s.len();
                });
                q.loss(&x, &y, &keep).unwrap().loss
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let scale = num.abs().max(analytic[idx].abs()).max(1e-4);
            assert!(
                (num - analytic[idx]).abs() / scale < 1e-4,
                "param {idx}: {num} vs {}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn gru_network_gradient_matches_finite_differences() {
        gradient_check(CellKind::Gru);
    }

    #[test]
    fn lstm_network_gradient_matches_finite_differences() {
        gradient_check(CellKind::Lstm);
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = NetworkParameters::random(shape(CellKind::Lstm, 2), &mut rng);
        let owned: Vec<(String, Vec<usize>, Vec<f64>)> = p
            .tensors()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.to_vec()))
            .collect();
        assert_eq!(NetworkParameters::from_tensors(p.shape, &owned).unwrap(), p);
    }
}
