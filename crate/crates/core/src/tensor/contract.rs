//! Two-operand Einstein summation.
//!
//! Axes are classified into batch (both operands and output), free (one
//! operand and output) and contracted (both operands, not output). Operands
//! are permuted into `[batch, free, contracted]` order and reduced with a
//! batched row-major matmul, then permuted into the requested output order.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    text: String,
    a: Vec<char>,
    b: Vec<char>,
    out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let malformed = |reason: &str| Error::MalformedSpec { spec: text.to_string(), reason: reason.to_string() };
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out) = compact.split_once("->").ok_or_else(|| malformed("missing '->'"))?;
        let (a, b) = inputs.split_once(',').ok_or_else(|| malformed("expected two operands"))?;
        let labels = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.chars().collect();
            if v.is_empty() {
                return Err(malformed("empty operand"));
            }
            if let Some(c) = v.iter().find(|c| !c.is_ascii_alphabetic()) {
                return Err(malformed(&format!("invalid axis label '{c}'")));
            }
            for (i, c) in v.iter().enumerate() {
                if v[..i].contains(c) {
                    return Err(malformed(&format!("axis '{c}' repeated within one operand")));
                }
            }
            Ok(v)
        };
        let (a, b, out) = (labels(a)?, labels(b)?, labels(out)?);
        for c in &out {
            if !a.contains(c) && !b.contains(c) {
                return Err(malformed(&format!("output axis '{c}' not present in any input")));
            }
        }
        for c in a.iter().chain(&b) {
            let in_both = a.contains(c) && b.contains(c);
            if !in_both && !out.contains(c) {
                return Err(malformed(&format!("axis '{c}' is summed within a single operand")));
            }
        }
        Ok(Self { text: compact, a, b, out })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Spec computing the gradient of the first operand: `out,b->a`.
    pub fn grad_a(&self) -> ContractSpec {
        self.derived(&self.out, &self.b, &self.a)
    }

    /// Spec computing the gradient of the second operand: `out,a->b`.
    pub fn grad_b(&self) -> ContractSpec {
        self.derived(&self.out, &self.a, &self.b)
    }

    fn derived(&self, x: &[char], y: &[char], out: &[char]) -> ContractSpec {
        let s = |v: &[char]| v.iter().collect::<String>();
        ContractSpec {
            text: format!("{},{}->{}", s(x), s(y), s(out)),
            a: x.to_vec(),
            b: y.to_vec(),
            out: out.to_vec(),
        }
    }

    pub fn apply(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != self.a.len() || b.rank() != self.b.len() {
            return Err(Error::MalformedSpec {
                spec: self.text.clone(),
                reason: format!("operand ranks {} and {} do not match the subscripts", a.rank(), b.rank()),
            });
        }
        let mut extent: HashMap<char, usize> = HashMap::new();
        for (c, &n) in self.a.iter().zip(a.shape()) {
            extent.insert(*c, n);
        }
        for (c, &n) in self.b.iter().zip(b.shape()) {
            if let Some(&m) = extent.get(c) {
                if m != n {
                    return Err(Error::AxisMismatch { axis: *c, left: m, right: n });
                }
            }
            extent.insert(*c, n);
        }

        let batch: Vec<char> = self.out.iter().copied().filter(|c| self.a.contains(c) && self.b.contains(c)).collect();
        let free_a: Vec<char> = self.out.iter().copied().filter(|c| self.a.contains(c) && !self.b.contains(c)).collect();
        let free_b: Vec<char> = self.out.iter().copied().filter(|c| self.b.contains(c) && !self.a.contains(c)).collect();
        let summed: Vec<char> = self.a.iter().copied().filter(|c| self.b.contains(c) && !self.out.contains(c)).collect();

        let size = |axes: &[char]| axes.iter().map(|c| extent[c]).product::<usize>();
        let (nb, m, k, n) = (size(&batch), size(&free_a), size(&summed), size(&free_b));

        let position = |labels: &[char], c: char| labels.iter().position(|&x| x == c).unwrap();
        let a_order: Vec<usize> = batch.iter().chain(&free_a).chain(&summed).map(|&c| position(&self.a, c)).collect();
        let b_order: Vec<usize> = batch.iter().chain(&summed).chain(&free_b).map(|&c| position(&self.b, c)).collect();
        let a_mat = a.permute(&a_order)?;
        let b_mat = b.permute(&b_order)?;

        let c = batched_matmul(a_mat.data(), b_mat.data(), nb, m, k, n);

        let c_labels: Vec<char> = batch.iter().chain(&free_a).chain(&free_b).copied().collect();
        let c_shape: Vec<usize> = c_labels.iter().map(|c| extent[c]).collect();
        let c = Tensor::new(&c_shape, c)?;
        let out_order: Vec<usize> = self.out.iter().map(|&x| position(&c_labels, x)).collect();
        c.permute(&out_order)
    }
}

/// Einstein summation of two tensors, e.g. `contract("ij,jk->ik", &a, &b)`.
pub fn contract(spec: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ContractSpec::parse(spec)?.apply(a, b)
}

fn batched_matmul(a: &[f64], b: &[f64], nb: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; nb * m * n];
    for batch in 0..nb {
        let a = &a[batch * m * k..(batch + 1) * m * k];
        let b = &b[batch * k * n..(batch + 1) * k * n];
        let c = &mut c[batch * m * n..(batch + 1) * m * n];
        if n == 1 {
            for (i, out) in c.iter_mut().enumerate() {
                *out = a[i * k..(i + 1) * k].iter().zip(b).map(|(x, y)| x * y).sum();
            }
            continue;
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eye = Tensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(contract("ij,jk->ik", &eye, &b).unwrap(), b);
    }

    #[test]
    fn zero_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let c = contract("ij,jk->ik", &a, &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(c, Tensor::zeros(&[4, 2]));
    }

    #[test]
    fn outer_product_and_transposed_output() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        let c = contract("i,j->ji", &a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.get(&[2, 1]), 10.0);
    }

    #[test]
    fn mismatch_names_axis() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match contract("ij,jk->ik", &a, &b) {
            Err(Error::AxisMismatch { axis, left, right }) => assert_eq!((axis, left, right), ('j', 3, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_specs() {
        for spec in ["ij,jk", "ij->ij", "iij,jk->ik", "ij,jk->iz", "ix,jk->ik", "i1,1k->ik"] {
            assert!(
                matches!(ContractSpec::parse(spec), Err(Error::MalformedSpec { .. })),
                "{spec} should be rejected"
            );
        }
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(contract("ijk,jk->i", &a, &a), Err(Error::MalformedSpec { .. })));
    }

    #[test]
    fn gradient_specs() {
        let s = ContractSpec::parse("bhtd,bhrd->bhtr").unwrap();
        assert_eq!(s.grad_a().as_str(), "bhtr,bhrd->bhtd");
        assert_eq!(s.grad_b().as_str(), "bhtr,bhtd->bhrd");
    }
}
