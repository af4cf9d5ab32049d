/// A collection of named parameter buffers.
///
/// Gradients use the same type as the parameters they belong to, so the
/// buffers of a value and of its gradient line up one-to-one in visit order.
pub trait Params {
    /// Named views of every buffer, in a stable order.
    fn slices(&self) -> Vec<(String, &[f64])>;

    fn slices_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, s) in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, s) in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Name of the buffer holding flat index `index`, with the offset inside it.
    fn locate(&self, index: usize) -> Option<(String, usize)> {
        let mut offset = 0;
        for (name, s) in self.slices() {
            if index < offset + s.len() {
                return Some((name, index - offset));
            }
            offset += s.len();
        }
        None
    }
}
