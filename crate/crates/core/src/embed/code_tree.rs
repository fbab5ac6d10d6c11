use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::EmbedError;

/// Huffman code tree over the vocabulary, used by hierarchical softmax.
///
/// Inner nodes are numbered `0..len-1` in creation order; the root is the
/// last one. At each inner node bit 0 is taken with probability
/// `sigmoid(h . v_inner)` and bit 1 with the complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTree {
    codes: Vec<Vec<u8>>,
    paths: Vec<Vec<usize>>,
}

impl CodeTree {
    /// Builds the tree from per-leaf counts (leaf `i` is vocabulary entry `i`).
    ///
    /// The two lightest subtrees are merged first, the lighter one becoming
    /// the bit-0 child. Ties prefer leaves over inner nodes, then the leaf
    /// rank in `keys` order (callers pass lexicographically sorted keys), then
    /// inner-node creation order.
    pub fn build(frequencies: &[u64]) -> Result<Self, EmbedError> {
        let n = frequencies.len();
        if n == 0 {
            return Err(EmbedError::EmptyVocabulary);
        }
        // (count, rank) where leaves have rank < n and inner nodes rank n + id.
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
            frequencies.iter().enumerate().map(|(i, &c)| Reverse((c.max(1), i))).collect();
        let mut children: Vec<[usize; 2]> = Vec::with_capacity(n.saturating_sub(1));
        while heap.len() > 1 {
            let Reverse((c0, r0)) = heap.pop().unwrap();
            let Reverse((c1, r1)) = heap.pop().unwrap();
            children.push([r0, r1]);
            heap.push(Reverse((c0 + c1, n + children.len() - 1)));
        }

        let mut codes = vec![Vec::new(); n];
        let mut paths = vec![Vec::new(); n];
        if let Some(root) = children.len().checked_sub(1) {
            // depth-first from the root carrying (code, path)
            let mut stack = vec![(root, Vec::<u8>::new(), Vec::<usize>::new())];
            while let Some((inner, code, path)) = stack.pop() {
                let mut path = path;
                path.push(inner);
                for (bit, &child) in children[inner].iter().enumerate() {
                    let mut c = code.clone();
                    c.push(bit as u8);
                    if child < n {
                        codes[child] = c;
                        paths[child] = path.clone();
                    } else {
                        stack.push((child - n, c, path.clone()));
                    }
                }
            }
        }
        Ok(Self { codes, paths })
    }

    pub fn leaves(&self) -> usize {
        self.codes.len()
    }

    pub fn inner_nodes(&self) -> usize {
        self.codes.len().saturating_sub(1)
    }

    pub fn code(&self, leaf: usize) -> &[u8] {
        &self.codes[leaf]
    }

    /// Inner nodes from the root down to the leaf's parent.
    pub fn path(&self, leaf: usize) -> &[usize] {
        &self.paths[leaf]
    }

    pub fn depth(&self, leaf: usize) -> usize {
        self.codes[leaf].len()
    }
}
