//! Multiply-add instrumentation.
//!
//! Every compute kernel reports its work into a [`FlopTrace`]. The unit is
//! one multiply-add; matmul and convolution counts are exact and are the
//! ones compared against the analytic complexity formulas. Softmax, norm and
//! activation work is tracked in separate buckets and excluded from that
//! comparison.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Work categories. `MatMul` and `Conv` carry exact multiply-add counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv,
    Softmax,
    Norm,
    Activation,
    Other,
}

/// Per-op-kind multiply-add accumulator with an optional scope label.
///
/// Traces are additive: [`FlopTrace::absorb`] adds a child's counts into the
/// parent and keeps the child for per-phase reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopTrace {
    pub label: String,
    pub matmul: u64,
    pub conv: u64,
    pub softmax: u64,
    pub norm: u64,
    pub activation: u64,
    pub other: u64,
    pub children: Vec<FlopTrace>,
}

impl FlopTrace {
    pub fn new(label: &str) -> Self {
        Self { label: label.to_string(), ..Self::default() }
    }

    pub fn add(&mut self, kind: OpKind, count: u64) {
        match kind {
            OpKind::MatMul => self.matmul += count,
            OpKind::Conv => self.conv += count,
            OpKind::Softmax => self.softmax += count,
            OpKind::Norm => self.norm += count,
            OpKind::Activation => self.activation += count,
            OpKind::Other => self.other += count,
        }
    }

    /// Multiply-adds that participate in the analytic comparison.
    pub fn core_mas(&self) -> u64 {
        self.matmul + self.conv
    }

    /// Everything, including the buckets excluded from the formulas.
    pub fn total(&self) -> u64 {
        self.matmul + self.conv + self.softmax + self.norm + self.activation + self.other
    }

    /// Add `child`'s counts into `self` and keep it as a labelled sub-scope.
    pub fn absorb(&mut self, child: FlopTrace) {
        self.matmul += child.matmul;
        self.conv += child.conv;
        self.softmax += child.softmax;
        self.norm += child.norm;
        self.activation += child.activation;
        self.other += child.other;
        self.children.push(child);
    }

    /// Find a direct child scope by label.
    pub fn child(&self, label: &str) -> Option<&FlopTrace> {
        self.children.iter().find(|c| c.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorb_is_additive() {
        let mut root = FlopTrace::new("root");
        root.add(OpKind::MatMul, 10);
        let mut child = FlopTrace::new("qkv");
        child.add(OpKind::Conv, 7);
        child.add(OpKind::Softmax, 3);
        root.absorb(child);
        assert_eq!(root.matmul, 10);
        assert_eq!(root.conv, 7);
        assert_eq!(root.core_mas(), 17);
        assert_eq!(root.total(), 20);
        assert_eq!(root.child("qkv").unwrap().conv, 7);
    }
}
