//! Generalized two-operand tensor contraction ("ij,jk->ik" style).
//!
//! One multiply-accumulate routine over the union of all index labels
//! serves the forward pass and both gradient passes: forward targets the
//! output, each gradient pass targets one operand with the other operand
//! and the upstream gradient as sources. Repeated labels within a single
//! operand (diagonals) are not supported.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct ContractPlan {
    pub spec: String,
    pub a_labels: Vec<char>,
    pub b_labels: Vec<char>,
    pub out_labels: Vec<char>,
    /// Union label order: output labels first, then summed labels.
    pub union_labels: Vec<char>,
    pub union_dims: Vec<usize>,
    pub a_strides: Vec<usize>,
    pub b_strides: Vec<usize>,
    pub out_strides: Vec<usize>,
    pub out_shape: Vec<usize>,
}

fn parse_labels(part: &str, spec: &str) -> Result<Vec<char>> {
    let labels: Vec<char> = part.chars().collect();
    for &c in &labels {
        if !c.is_ascii_alphabetic() {
            return Err(Error::ContractSpec {
                spec: spec.to_string(),
                reason: format!("index label '{c}' is not a letter"),
            });
        }
    }
    for (i, &c) in labels.iter().enumerate() {
        if labels[i + 1..].contains(&c) {
            return Err(Error::ContractSpec {
                spec: spec.to_string(),
                reason: format!("label '{c}' repeated within one operand"),
            });
        }
    }
    Ok(labels)
}

pub fn parse_spec(spec: &str) -> Result<(Vec<char>, Vec<char>, Vec<char>)> {
    let (lhs, out) = spec.split_once("->").ok_or_else(|| Error::ContractSpec {
        spec: spec.to_string(),
        reason: "missing '->'".to_string(),
    })?;
    let (a, b) = lhs.split_once(',').ok_or_else(|| Error::ContractSpec {
        spec: spec.to_string(),
        reason: "expected exactly two operands".to_string(),
    })?;
    let a_labels = parse_labels(a, spec)?;
    let b_labels = parse_labels(b, spec)?;
    let out_labels = parse_labels(out, spec)?;
    for &c in &out_labels {
        if !a_labels.contains(&c) && !b_labels.contains(&c) {
            return Err(Error::ContractSpec {
                spec: spec.to_string(),
                reason: format!("output label '{c}' absent from both operands"),
            });
        }
    }
    Ok((a_labels, b_labels, out_labels))
}

/// Strides of `labels` within the union order; 0 where a label is absent.
fn strides_in_union(union: &[char], labels: &[char], shape: &[usize]) -> Vec<usize> {
    let mut row_major = vec![0usize; labels.len()];
    let mut acc = 1;
    for d in (0..labels.len()).rev() {
        row_major[d] = acc;
        acc *= shape[d];
    }
    union
        .iter()
        .map(|c| labels.iter().position(|l| l == c).map_or(0, |d| row_major[d]))
        .collect()
}

impl ContractPlan {
    pub fn build(spec: &str, a_shape: &[usize], b_shape: &[usize]) -> Result<ContractPlan> {
        let (a_labels, b_labels, out_labels) = parse_spec(spec)?;
        if a_labels.len() != a_shape.len() {
            return Err(Error::Shape(format!(
                "contract '{spec}': first operand has rank {}, labels imply {}",
                a_shape.len(),
                a_labels.len()
            )));
        }
        if b_labels.len() != b_shape.len() {
            return Err(Error::Shape(format!(
                "contract '{spec}': second operand has rank {}, labels imply {}",
                b_shape.len(),
                b_labels.len()
            )));
        }
        let mut sizes: Vec<(char, usize)> = Vec::new();
        let mut record = |label: char, size: usize| -> Result<()> {
            match sizes.iter().find(|(c, _)| *c == label) {
                Some(&(_, existing)) if existing != size => {
                    Err(Error::ContractIndex { label, left: existing, right: size })
                }
                Some(_) => Ok(()),
                None => {
                    sizes.push((label, size));
                    Ok(())
                }
            }
        };
        for (d, &c) in a_labels.iter().enumerate() {
            record(c, a_shape[d])?;
        }
        for (d, &c) in b_labels.iter().enumerate() {
            record(c, b_shape[d])?;
        }

        let size_of = |c: char| sizes.iter().find(|(l, _)| *l == c).unwrap().1;
        let mut union_labels = out_labels.clone();
        for &c in a_labels.iter().chain(&b_labels) {
            if !union_labels.contains(&c) {
                union_labels.push(c);
            }
        }
        let union_dims: Vec<usize> = union_labels.iter().map(|&c| size_of(c)).collect();
        let out_shape: Vec<usize> = out_labels.iter().map(|&c| size_of(c)).collect();

        Ok(ContractPlan {
            spec: spec.to_string(),
            a_strides: strides_in_union(&union_labels, &a_labels, a_shape),
            b_strides: strides_in_union(&union_labels, &b_labels, b_shape),
            out_strides: strides_in_union(&union_labels, &out_labels, &out_shape),
            a_labels,
            b_labels,
            out_labels,
            union_labels,
            union_dims,
            out_shape,
        })
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let out_numel: usize = self.out_shape.iter().product();
        let mut out = vec![T::zero(); out_numel];
        madd_union(&self.union_dims, &self.out_strides, &self.a_strides, &self.b_strides, &mut out, a, b);
        out
    }

    /// Gradient w.r.t. the first operand: accumulate dout ⊗ b into `grad_a`.
    pub fn grad_a<T: Scalar>(&self, dout: &[T], b: &[T], grad_a: &mut [T]) {
        madd_union(&self.union_dims, &self.a_strides, &self.out_strides, &self.b_strides, grad_a, dout, b);
    }

    /// Gradient w.r.t. the second operand.
    pub fn grad_b<T: Scalar>(&self, dout: &[T], a: &[T], grad_b: &mut [T]) {
        madd_union(&self.union_dims, &self.b_strides, &self.out_strides, &self.a_strides, grad_b, dout, a);
    }
}

/// target[t] += x[i] * y[j] over the full union index space.
fn madd_union<T: Scalar>(
    dims: &[usize],
    t_strides: &[usize],
    x_strides: &[usize],
    y_strides: &[usize],
    target: &mut [T],
    x: &[T],
    y: &[T],
) {
    let n = dims.len();
    if n == 0 {
        target[0] = target[0] + x[0] * y[0];
        return;
    }
    let last = n - 1;
    let (dl, tl, xl, yl) = (dims[last], t_strides[last], x_strides[last], y_strides[last]);
    let outer: usize = dims[..last].iter().product();

    let mut idx = vec![0usize; last];
    let (mut t_off, mut x_off, mut y_off) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        if tl == 0 {
            // Inner dim is summed for the target: accumulate one cell.
            let mut s = T::zero();
            for k in 0..dl {
                s = s + x[x_off + k * xl] * y[y_off + k * yl];
            }
            target[t_off] = target[t_off] + s;
        } else {
            for k in 0..dl {
                target[t_off + k * tl] = target[t_off + k * tl] + x[x_off + k * xl] * y[y_off + k * yl];
            }
        }
        // Odometer increment over the outer digits.
        for d in (0..last).rev() {
            idx[d] += 1;
            t_off += t_strides[d];
            x_off += x_strides[d];
            y_off += y_strides[d];
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
            t_off -= t_strides[d] * dims[d];
            x_off -= x_strides[d] * dims[d];
            y_off -= y_strides[d] * dims[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    /// Naive oracle: loop over the union space with explicit multi-indices.
    fn contract_loop_oracle(
        spec: &str,
        a: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> Tensor<f64> {
        let plan = ContractPlan::build(spec, a.shape(), b.shape()).unwrap();
        let mut out = Tensor::<f64>::zeros(&plan.out_shape);
        let total: usize = plan.union_dims.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut coords = vec![0usize; plan.union_dims.len()];
            for d in (0..plan.union_dims.len()).rev() {
                coords[d] = rem % plan.union_dims[d];
                rem /= plan.union_dims[d];
            }
            let pick = |labels: &[char], shape: &[usize]| -> usize {
                let mut off = 0;
                for (d, &c) in labels.iter().enumerate() {
                    let u = plan.union_labels.iter().position(|&l| l == c).unwrap();
                    off = off * shape[d] + coords[u];
                }
                off
            };
            let ai = pick(&plan.a_labels, a.shape());
            let bi = pick(&plan.b_labels, b.shape());
            let oi = pick(&plan.out_labels, &plan.out_shape);
            out.data_mut()[oi] += a.data()[ai] * b.data()[bi];
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::from_fn(&[2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let plan = ContractPlan::build("ij,jk->ik", a.shape(), b.shape()).unwrap();
        let out = plan.forward(a.data(), b.data());
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn identity_bilinear_factor() {
        let a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let plan = ContractPlan::build("q,qv->v", a.shape(), b.shape()).unwrap();
        assert_eq!(plan.forward(a.data(), b.data()), vec![1.0, 2.0]);
    }

    #[test]
    fn random_btq_qv_matches_loop_oracle() {
        let mut rng = rng_for(11, &[0]);
        let a = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
        let plan = ContractPlan::build("btq,qv->btv", a.shape(), b.shape()).unwrap();
        let got = Tensor::new(plan.out_shape.clone(), plan.forward(a.data(), b.data())).unwrap();
        let want = contract_loop_oracle("btq,qv->btv", &a, &b);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sum_out_label_only_in_one_operand() {
        // "ij,j->j" sums over i on the left operand.
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 2.0]).unwrap();
        let plan = ContractPlan::build("ij,j->j", a.shape(), b.shape()).unwrap();
        assert_eq!(plan.forward(a.data(), b.data()), vec![5.0, 7.0, 18.0]);
    }

    #[test]
    fn dimension_conflict_names_label_and_sizes() {
        let err = ContractPlan::build("ij,jk->ik", &[2, 3], &[4, 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('j') && msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn malformed_specs_rejected() {
        assert!(ContractPlan::build("ij,jk", &[2, 2], &[2, 2]).is_err());
        assert!(ContractPlan::build("iij,jk->ik", &[2, 2, 2], &[2, 2]).is_err());
        assert!(ContractPlan::build("ij,jk->iz", &[2, 2], &[2, 2]).is_err());
        assert!(ContractPlan::build("i j,jk->ik", &[2, 2], &[2, 2]).is_err());
    }

    #[test]
    fn bilinearity_in_first_operand() {
        let mut rng = rng_for(12, &[0]);
        let a = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 2], 1.0, &mut rng);
        let plan = ContractPlan::build("ij,jk->ik", a.shape(), b.shape()).unwrap();
        let base = plan.forward(a.data(), b.data());
        let scaled_a: Vec<f64> = a.data().iter().map(|x| 2.5 * x).collect();
        let scaled_out = plan.forward(&scaled_a, b.data());
        for (s, v) in scaled_out.iter().zip(&base) {
            assert!((s - 2.5 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_match_loop_oracle_definition() {
        // d(out)/d(a) contraction checked against explicit accumulation.
        let mut rng = rng_for(13, &[0]);
        let a = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
        let plan = ContractPlan::build("btq,qv->btv", a.shape(), b.shape()).unwrap();
        let dout = Tensor::<f64>::uniform(&plan.out_shape.clone(), 1.0, &mut rng);

        let mut got = vec![0.0; a.numel()];
        plan.grad_a(dout.data(), b.data(), &mut got);

        let mut want = vec![0.0; a.numel()];
        for bb in 0..2 {
            for t in 0..3 {
                for q in 0..4 {
                    for v in 0..5 {
                        want[(bb * 3 + t) * 4 + q] += dout.at(&[bb, t, v]) * b.at(&[q, v]);
                    }
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
