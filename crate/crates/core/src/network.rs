//! The progressive topology: hidden layers made of fixed-width perceptron
//! blocks followed by a linear output layer.
//!
//! Growth happens at the end of the last layer. At most one block is
//! trainable at a time; everything else is frozen.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{softmax_cross_entropy, softmax_rows, Matrix, RngState};

pub const MODEL_MAGIC: [u8; 4] = *b"PMLP";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `d_in x width`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl Block {
    /// Uniform draws in `[-sqrt(6/d_in), sqrt(6/d_in)]`, row-major; zero bias.
    pub fn he_uniform(d_in: usize, width: usize, rng: &mut RngState) -> Block {
        let limit = (6.0 / d_in as f64).sqrt();
        let data = (0..d_in * width)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Block {
            weight: Matrix::from_vec(d_in, width, data).expect("sized by construction"),
            bias: vec![0.0; width],
            frozen: false,
        }
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    fn preactivation(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul(&self.weight)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub blocks: Vec<Block>,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.blocks.iter().map(Block::width).sum()
    }

    pub fn d_in(&self) -> usize {
        self.blocks.first().map_or(0, Block::d_in)
    }

    /// Concatenated block pre-activations.
    fn preactivation(&self, input: &Matrix) -> Result<Matrix> {
        let parts = self
            .blocks
            .iter()
            .map(|b| b.preactivation(input))
            .collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&parts.iter().collect::<Vec<_>>())
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Activations feeding the output layer (the input itself when there are no layers).
    pub last_hidden: Matrix,
    pub probabilities: Matrix,
}

/// Parameter gradients in canonical order: per layer, per block, weight then
/// bias; then output weight and output bias.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    input_dim: usize,
    num_classes: usize,
    pub layers: Vec<Layer>,
    /// `width(last layer) x K`
    pub output_weight: Matrix,
    pub output_bias: Vec<f64>,
    step_count: usize,
}

impl Topology {
    /// No hidden layers; a zero linear map from inputs to logits.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            layers: Vec::new(),
            output_weight: Matrix::zeros(input_dim, num_classes),
            output_bias: vec![0.0; num_classes],
            step_count: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of blocks added so far.
    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn last_width(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::width)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.layers.iter().flat_map(|l| l.blocks.iter())
    }

    /// `(layer, block)` of the unfrozen block, if any.
    pub fn trainable_block(&self) -> Option<(usize, usize)> {
        self.layers.iter().enumerate().find_map(|(li, l)| {
            l.blocks
                .iter()
                .position(|b| !b.frozen)
                .map(|bi| (li, bi))
        })
    }

    fn ensure_all_frozen(&self) -> Result<()> {
        match self.trainable_block() {
            Some(_) => Err(Error::UnfrozenBlock),
            None => Ok(()),
        }
    }

    /// Appends a trainable block to the last layer. The output layer gains
    /// zero rows, so logits are unchanged until the block is trained.
    pub fn add_block(&mut self, d_in_check: usize, block_size: usize, rng: &mut RngState) -> Result<()> {
        self.ensure_all_frozen()?;
        let layer = self.layers.last_mut().ok_or(Error::NoLayer)?;
        if layer.d_in() != d_in_check {
            return Err(Error::Dimension(format!(
                "last layer consumes {} inputs, caller expected {d_in_check}",
                layer.d_in()
            )));
        }
        if block_size == 0 {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        layer.blocks.push(Block::he_uniform(d_in_check, block_size, rng));
        self.output_weight.push_zero_rows(block_size);
        self.step_count += 1;
        Ok(())
    }

    /// Starts a new hidden layer fed by the previous last layer, holding one
    /// trainable block. The output layer is replaced by a zero `b x K` layer.
    pub fn start_new_layer(&mut self, block_size: usize, rng: &mut RngState) -> Result<()> {
        self.ensure_all_frozen()?;
        if block_size == 0 {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        let d_in = self.last_width();
        self.layers.push(Layer {
            blocks: vec![Block::he_uniform(d_in, block_size, rng)],
        });
        self.output_weight = Matrix::zeros(block_size, self.num_classes);
        self.output_bias = vec![0.0; self.num_classes];
        self.step_count += 1;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.layers
            .iter_mut()
            .flat_map(|l| l.blocks.iter_mut())
            .for_each(|b| b.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.layers
            .iter_mut()
            .flat_map(|l| l.blocks.iter_mut())
            .for_each(|b| b.frozen = false);
    }

    pub fn param_count(&self) -> usize {
        self.blocks()
            .map(|b| b.weight.data().len() + b.bias.len())
            .sum::<usize>()
            + self.output_weight.data().len()
            + self.output_bias.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, topology expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn output(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut logits = hidden.matmul(&self.output_weight)?;
        logits.add_row_vector(&self.output_bias)?;
        Ok(logits)
    }

    /// Inference pass: rectifier hidden layers, affine output, row softmax.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.preactivation(&h)?;
            z.map_inplace(relu);
            h = z;
        }
        let logits = self.output(&h)?;
        let probabilities = softmax_rows(&logits);
        Ok(ForwardOutput {
            logits,
            last_hidden: h,
            probabilities,
        })
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.logits.argmax_rows())
    }

    /// Mutable views of every parameter tensor in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            for block in &mut layer.blocks {
                out.push(block.weight.data_mut());
                out.push(&mut block.bias);
            }
        }
        out.push(self.output_weight.data_mut());
        out.push(&mut self.output_bias);
        out
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push(b.weight.data().len());
            out.push(b.bias.len());
        }
        out.push(self.output_weight.data().len());
        out.push(self.output_bias.len());
        out
    }

    /// Mean cross-entropy over `(x, labels)` and the gradient of every
    /// parameter. `masks`, when given, holds one multiplier matrix per hidden
    /// layer (`n x width`) applied after the rectifier.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix,
        labels: &[usize],
        masks: Option<&[Matrix]>,
    ) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        if let Some(m) = masks {
            if m.len() != self.layers.len() {
                return Err(Error::Dimension(format!(
                    "{} dropout masks for {} layers",
                    m.len(),
                    self.layers.len()
                )));
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let z = layer.preactivation(&h)?;
            let mut a = z.clone();
            a.map_inplace(relu);
            if let Some(m) = masks {
                apply_mask(&mut a, &m[li])?;
            }
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        let logits = self.output(&h)?;
        let loss = softmax_cross_entropy(&logits, labels)?;
        let dlogits = &loss.grad_logits;

        let mut tensors: Vec<Vec<f64>> = Vec::new();
        let out_w = h.t_matmul(dlogits)?.into_vec();
        let out_b = dlogits.column_sums();
        let mut d_act = dlogits.matmul_t(&self.output_weight)?;
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let mut dz = d_act;
            if let Some(m) = masks {
                apply_mask(&mut dz, &m[li])?;
            }
            for (g, z) in dz.data_mut().iter_mut().zip(pre[li].data()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut start = 0;
            let mut grads = Vec::with_capacity(layer.blocks.len() * 2);
            let mut d_in = Matrix::zeros(dz.rows(), layer.d_in());
            for block in &layer.blocks {
                let dz_b = dz.column_slice(start, block.width());
                grads.push(inputs[li].t_matmul(&dz_b)?.into_vec());
                grads.push(dz_b.column_sums());
                if li > 0 {
                    let contrib = dz_b.matmul_t(&block.weight)?;
                    for (d, c) in d_in.data_mut().iter_mut().zip(contrib.data()) {
                        *d += c;
                    }
                }
                start += block.width();
            }
            per_layer[li] = grads;
            d_act = d_in;
        }
        for g in per_layer {
            tensors.extend(g);
        }
        tensors.push(out_w);
        tensors.push(out_b);
        Ok((loss.loss, Gradients { tensors }))
    }

    /// Precomputes everything upstream of the trainable block for rows `x`.
    pub fn block_cache(&self, x: &Matrix) -> Result<BlockCache> {
        self.check_input(x)?;
        let (li, bi) = self.trainable_block().ok_or(Error::NoTrainableBlock)?;
        if li + 1 != self.layers.len() || bi + 1 != self.layers[li].blocks.len() {
            return Err(Error::InvalidData(
                "trainable block must be the last block of the last layer".into(),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers[..li] {
            let mut z = layer.preactivation(&h)?;
            z.map_inplace(relu);
            h = z;
        }
        let last = &self.layers[li];
        let frozen_parts = last.blocks[..bi]
            .iter()
            .map(|b| {
                let mut z = b.preactivation(&h)?;
                z.map_inplace(relu);
                Ok(z)
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen = if frozen_parts.is_empty() {
            Matrix::zeros(h.rows(), 0)
        } else {
            Matrix::hstack(&frozen_parts.iter().collect::<Vec<_>>())?
        };
        Ok(BlockCache { prev: h, frozen })
    }

    pub fn trainable(&self) -> Result<TrainableParams> {
        let (li, bi) = self.trainable_block().ok_or(Error::NoTrainableBlock)?;
        let block = &self.layers[li].blocks[bi];
        Ok(TrainableParams {
            weight: block.weight.clone(),
            bias: block.bias.clone(),
            output_weight: self.output_weight.clone(),
            output_bias: self.output_bias.clone(),
        })
    }

    /// Copies `params` into the trainable block and the output layer.
    pub fn install(&mut self, params: &TrainableParams) -> Result<()> {
        let (li, bi) = self.trainable_block().ok_or(Error::NoTrainableBlock)?;
        let block = &mut self.layers[li].blocks[bi];
        if block.weight.rows() != params.weight.rows()
            || block.weight.cols() != params.weight.cols()
            || self.output_weight.rows() != params.output_weight.rows()
            || self.output_weight.cols() != params.output_weight.cols()
        {
            return Err(Error::Dimension("trainable parameter shapes differ".into()));
        }
        block.weight = params.weight.clone();
        block.bias = params.bias.clone();
        self.output_weight = params.output_weight.clone();
        self.output_bias = params.output_bias.clone();
        Ok(())
    }

    /// Raw little-endian bytes of every frozen block's weights and bias.
    pub fn frozen_block_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in self.blocks().filter(|b| b.frozen) {
            for v in b.weight.data().iter().chain(&b.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Serializes to the PMLP model format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let u32_of = |v: usize| {
            u32::try_from(v).map_err(|_| Error::InvalidData(format!("{v} exceeds u32")))
        };
        let mut out = Vec::with_capacity(32 + self.param_count() * 8);
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.input_dim)?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.num_classes)?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.layers.len())?.to_le_bytes());
        for layer in &self.layers {
            let size = layer.blocks.first().map_or(0, Block::width);
            if layer.blocks.iter().any(|b| b.width() != size) {
                return Err(Error::InvalidData("blocks in a layer differ in width".into()));
            }
            out.extend_from_slice(&u32_of(layer.blocks.len())?.to_le_bytes());
            out.extend_from_slice(&u32_of(size)?.to_le_bytes());
        }
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for b in self.blocks() {
            put(b.weight.data());
            put(&b.bias);
        }
        put(self.output_weight.data());
        put(&self.output_bias);
        Ok(out)
    }

    /// Parses the PMLP model format. Every loaded block is frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Topology> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::BadMagic {
            expected: MODEL_MAGIC,
            found: bytes.to_vec(),
        })?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let d = r.u32()?;
        let k = r.u32()?;
        let n_layers = r.u32()?;
        if d == 0 || k == 0 {
            return Err(Error::InvalidData(format!("model header D={d}, K={k}")));
        }
        let shapes = (0..n_layers)
            .map(|_| Ok((r.u32()?, r.u32()?)))
            .collect::<Result<Vec<_>>>()?;
        let mut topo = Topology::new(d, k);
        let mut d_in = d;
        for &(count, size) in &shapes {
            if count == 0 || size == 0 {
                return Err(Error::InvalidData("empty layer in model file".into()));
            }
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                let weight = Matrix::from_vec(d_in, size, r.f64s(d_in * size)?)?;
                let bias = r.f64s(size)?;
                blocks.push(Block {
                    weight,
                    bias,
                    frozen: true,
                });
            }
            topo.step_count += count;
            topo.layers.push(Layer { blocks });
            d_in = count * size;
        }
        topo.output_weight = Matrix::from_vec(d_in, k, r.f64s(d_in * k)?)?;
        topo.output_bias = r.f64s(k)?;
        if r.pos != bytes.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes in model file",
                bytes.len() - r.pos
            )));
        }
        Ok(topo)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Topology> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Topology::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn apply_mask(m: &mut Matrix, mask: &Matrix) -> Result<()> {
    if m.rows() != mask.rows() || m.cols() != mask.cols() {
        return Err(Error::Dimension(format!(
            "mask {}x{} for activations {}x{}",
            mask.rows(),
            mask.cols(),
            m.rows(),
            m.cols()
        )));
    }
    for (v, k) in m.data_mut().iter_mut().zip(mask.data()) {
        *v *= k;
    }
    Ok(())
}

/// Parameters touched while optimizing one block: the block itself and the
/// whole output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub output_weight: Matrix,
    pub output_bias: Vec<f64>,
}

impl TrainableParams {
    pub fn lengths(&self) -> [usize; 4] {
        [
            self.weight.data().len(),
            self.bias.len(),
            self.output_weight.data().len(),
            self.output_bias.len(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.weight.data_mut(),
            &mut self.bias,
            self.output_weight.data_mut(),
            &mut self.output_bias,
        ]
    }
}

/// Frozen-prefix activations for a fixed set of rows: the input to the last
/// layer and the outputs of its frozen blocks.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub prev: Matrix,
    pub frozen: Matrix,
}

impl BlockCache {
    pub fn rows(&self) -> usize {
        self.prev.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> BlockCache {
        BlockCache {
            prev: self.prev.select_rows(idx),
            frozen: self.frozen.select_rows(idx),
        }
    }

    fn hidden(&self, params: &TrainableParams, mask: Option<&Matrix>) -> Result<(Matrix, Matrix)> {
        let mut z = self.prev.matmul(&params.weight)?;
        z.add_row_vector(&params.bias)?;
        let mut a = z.clone();
        a.map_inplace(relu);
        if let Some(m) = mask {
            apply_mask(&mut a, m)?;
        }
        Ok((z, Matrix::hstack(&[&self.frozen, &a])?))
    }

    /// Logits for the cached rows with `params` in the trainable slot.
    pub fn logits(&self, params: &TrainableParams) -> Result<Matrix> {
        let (_, h) = self.hidden(params, None)?;
        let mut logits = h.matmul(&params.output_weight)?;
        logits.add_row_vector(&params.output_bias)?;
        Ok(logits)
    }

    /// Loss and gradients of the trainable parameters, in
    /// [`TrainableParams::slices_mut`] order. `mask` (`n x b`) multiplies the
    /// block's activations.
    pub fn loss_and_gradients(
        &self,
        params: &TrainableParams,
        labels: &[usize],
        mask: Option<&Matrix>,
    ) -> Result<(f64, [Vec<f64>; 4])> {
        let (z, h) = self.hidden(params, mask)?;
        let mut logits = h.matmul(&params.output_weight)?;
        logits.add_row_vector(&params.output_bias)?;
        let loss = softmax_cross_entropy(&logits, labels)?;
        let dl = &loss.grad_logits;
        let d_out_w = h.t_matmul(dl)?.into_vec();
        let d_out_b = dl.column_sums();
        let w_frozen = self.frozen.cols();
        let b = params.bias.len();
        let new_rows = params.output_weight.select_rows(&(w_frozen..w_frozen + b).collect::<Vec<_>>());
        let mut dz = dl.matmul_t(&new_rows)?;
        if let Some(m) = mask {
            apply_mask(&mut dz, m)?;
        }
        for (g, zv) in dz.data_mut().iter_mut().zip(z.data()) {
            if *zv <= 0.0 {
                *g = 0.0;
            }
        }
        let d_w = self.prev.t_matmul(&dz)?.into_vec();
        let d_b = dz.column_sums();
        Ok((loss.loss, [d_w, d_b, d_out_w, d_out_b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn grown(d: usize, k: usize, b: usize, blocks: usize, seed: u64) -> Topology {
        let mut rng = RngState::new(seed);
        let mut t = Topology::new(d, k);
        t.start_new_layer(b, &mut rng).unwrap();
        for _ in 1..blocks {
            t.freeze_all();
            t.add_block(d, b, &mut rng).unwrap();
        }
        t.output_weight = random_matrix(t.last_width(), k, &mut rng);
        t
    }

    #[test]
    fn zero_topology_is_uniform() {
        let mut t = Topology::new(4, 3);
        let mut rng = RngState::new(1);
        t.start_new_layer(2, &mut rng).unwrap();
        t.layers[0].blocks[0].weight = Matrix::zeros(4, 2);
        let out = t.forward(&Matrix::zeros(2, 4)).unwrap();
        for v in out.probabilities.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_logits() {
        let mut t = Topology::new(2, 2);
        t.start_new_layer(2, &mut RngState::new(0)).unwrap();
        t.layers[0].blocks[0].weight = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        t.layers[0].blocks[0].bias = vec![0.5, 0.0];
        t.output_weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        t.output_bias = vec![0.1, -0.1];
        // x = [1, 1]: z = [1+2+0.5, -1+0.5] = [3.5, -0.5] -> h = [3.5, 0]
        let out = t.forward(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(out.logits.data(), &[3.6, -0.1]);
        assert_eq!(out.last_hidden.data(), &[3.5, 0.0]);
    }

    #[test]
    fn batch_equals_stacked_singles() {
        let t = grown(5, 3, 4, 3, 2);
        let mut rng = RngState::new(3);
        let x = random_matrix(4, 5, &mut rng);
        let batch = t.forward(&x).unwrap();
        for r in 0..4 {
            let single = t.forward(&x.select_rows(&[r])).unwrap();
            for (a, b) in single.logits.data().iter().zip(batch.logits.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn add_block_bookkeeping_and_zero_extension() {
        let mut t = grown(6, 3, 4, 2, 5);
        t.freeze_all();
        let x = random_matrix(7, 6, &mut RngState::new(9));
        let before = t.forward(&x).unwrap().logits;
        let old_rows = t.output_weight.clone();
        t.add_block(6, 4, &mut RngState::new(10)).unwrap();
        assert_eq!(t.last_width(), 12);
        assert_eq!(t.output_weight.rows(), 12);
        assert_eq!(&t.output_weight.data()[..old_rows.data().len()], old_rows.data());
        assert!(t.output_weight.data()[old_rows.data().len()..].iter().all(|&v| v == 0.0));
        let after = t.forward(&x).unwrap().logits;
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
        assert_eq!(t.trainable_block(), Some((0, 2)));
    }

    #[test]
    fn add_block_requires_frozen_and_matching_d_in() {
        let mut t = grown(3, 2, 2, 1, 1);
        assert!(matches!(t.add_block(3, 2, &mut RngState::new(0)), Err(Error::UnfrozenBlock)));
        t.freeze_all();
        assert!(matches!(t.add_block(4, 2, &mut RngState::new(0)), Err(Error::Dimension(_))));
        assert!(matches!(Topology::new(3, 2).add_block(3, 2, &mut RngState::new(0)), Err(Error::NoLayer)));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Block::he_uniform(8, 4, &mut RngState::new(77));
        let b = Block::he_uniform(8, 4, &mut RngState::new(77));
        assert_eq!(a, b);
        let limit = (6.0f64 / 8.0).sqrt();
        assert!(a.weight.data().iter().all(|v| v.abs() <= limit));
        let mut rng = RngState::new(77);
        let first = rng.uniform_range(-limit, limit);
        assert_eq!(a.weight.get(0, 0), first);
    }

    #[test]
    fn start_new_layer_resets_output() {
        let mut t = grown(5, 3, 4, 3, 4);
        let before = t.param_count();
        let hidden_before = before - t.output_weight.data().len() - 3;
        t.freeze_all();
        t.start_new_layer(4, &mut RngState::new(1)).unwrap();
        assert_eq!(t.layers.len(), 2);
        assert_eq!(t.last_width(), 4);
        assert_eq!((t.output_weight.rows(), t.output_weight.cols()), (4, 3));
        assert!(t.output_weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.param_count(), hidden_before + (12 * 4 + 4) + (4 * 3 + 3));
        let p = t.forward(&random_matrix(3, 5, &mut RngState::new(2))).unwrap().probabilities;
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn param_count_small() {
        let mut t = Topology::new(2, 2);
        t.start_new_layer(3, &mut RngState::new(0)).unwrap();
        assert_eq!(t.param_count(), 17);
    }

    #[test]
    fn predict_tie_goes_low() {
        let mut t = Topology::new(1, 3);
        t.output_bias = vec![0.2, 0.9, 0.9];
        assert_eq!(t.predict(&Matrix::zeros(1, 1)).unwrap(), vec![1]);
    }

    #[test]
    fn model_round_trip() {
        let mut t = grown(4, 3, 2, 3, 8);
        t.freeze_all();
        let mut rng = RngState::new(12);
        t.start_new_layer(2, &mut rng).unwrap();
        t.output_weight = random_matrix(2, 3, &mut rng);
        t.freeze_all();
        let bytes = t.to_bytes().unwrap();
        let back = Topology::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(Topology::from_bytes(b"XXXX\x01\x00"), Err(Error::BadMagic { .. })));
        assert!(matches!(Topology::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn block_cache_matches_full_forward() {
        let mut t = grown(5, 4, 3, 2, 21);
        t.freeze_all();
        t.add_block(5, 3, &mut RngState::new(1)).unwrap();
        t.output_weight = random_matrix(9, 4, &mut RngState::new(2));
        let x = random_matrix(6, 5, &mut RngState::new(3));
        let cache = t.block_cache(&x).unwrap();
        let params = t.trainable().unwrap();
        assert_eq!(cache.logits(&params).unwrap(), t.forward(&x).unwrap().logits);
    }
}
