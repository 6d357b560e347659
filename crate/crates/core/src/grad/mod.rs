//! Reverse-mode differentiation and finite-difference checking.

mod check;
mod tape;

pub use check::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP, MAX_CHECKED_ENTRIES};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{FeatureMatrix, SIGMA_FLOOR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        FeatureMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn assert_checks<F>(params: Vec<(String, FeatureMatrix)>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
    {
        let report = grad_check(&params, build, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        let w = random(4, 2, &mut rng);
        let row = random(1, 4, &mut rng).map(|x| x + 2.0);
        let named = |v: Vec<FeatureMatrix>| -> Vec<(String, FeatureMatrix)> {
            v.into_iter()
                .enumerate()
                .map(|(i, m)| (format!("p{i}"), m))
                .collect()
        };

        assert_checks(named(vec![a.clone(), w.clone()]), |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        });
        assert_checks(named(vec![a.clone(), b.clone()]), |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let sq = t.square(m)?;
            let bt = t.transpose(v[1])?;
            let mm = t.matmul(sq, bt)?;
            t.mean_all(mm)
        });
        assert_checks(named(vec![a.clone(), b.map(|x| x + 3.0)]), |t, v| {
            let q = t.div(v[0], v[1])?;
            let l = t.offset(v[1], 0.5)?;
            let l = t.ln(l)?;
            let s = t.add(q, l)?;
            let s = t.scale(s, 0.7)?;
            t.sum(s)
        });
        assert_checks(named(vec![a.clone(), row.clone()]), |t, v| {
            let x = t.add_row(v[0], v[1])?;
            let x = t.mul_row(x, v[1])?;
            let x = t.sub_row(x, v[1])?;
            let x = t.div_row(x, v[1])?;
            let x = t.tanh(x)?;
            t.sum(x)
        });
        assert_checks(named(vec![a.clone(), b.clone()]), |t, v| {
            let c = t.concat_cols(v[0], v[1])?;
            let n = t.row_normalize(c)?;
            let nt = t.transpose(n)?;
            let s = t.matmul(n, nt)?;
            let ls = t.log_softmax_rows(s)?;
            t.mean_neg_diag(ls)
        });
        assert_checks(named(vec![random(6, 3, &mut rng)]), |t, v| {
            let m = t.col_mean(v[0])?;
            let s = t.col_std(v[0], SIGMA_FLOOR)?;
            let c = t.sub_row(v[0], m)?;
            let z = t.div_row(c, s)?;
            let z = t.tanh(z)?;
            let sm = t.mean_all(s)?;
            let zs = t.sum(z)?;
            t.mul(zs, sm)
        });
    }
}
