//! The multi-agent observation model `y = Hx + n`, `n ~ N(0, R)`.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::linalg::{self, check_finite, check_symmetric, Mat, Tolerance};
use crate::{Error, Result};

/// Validated system model. Agent indices are 0-based throughout the API.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    h: Mat,
    r: Mat,
    j0: Option<Mat>,
    u: Mat,
    g: Vec<Mat>,
    agent_dims: Vec<usize>,
}

/// Contiguous measurement rows `𝒮_i` owned by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentSlice {
    pub agent_index: usize,
    pub start: usize,
    pub len: usize,
}

impl AgentSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Per-agent privacy thresholds and optional noise-power budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyRequest {
    pub eps: Vec<f64>,
    pub delta: Option<Vec<f64>>,
}

impl PrivacyRequest {
    pub fn new(eps: Vec<f64>) -> Self {
        Self { eps, delta: None }
    }

    pub fn uniform(agents: usize, eps: f64) -> Self {
        Self::new(alloc::vec![eps; agents])
    }

    pub fn validate(&self, agents: usize) -> Result<()> {
        if self.eps.len() != agents {
            return Err(Error::DimensionMismatch { field: "eps".into(), detail: format!("{} thresholds for {agents} agents", self.eps.len()) });
        }
        if let Some(e) = self.eps.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::InvalidInput(format!("privacy threshold {e} must be finite and >= 0")));
        }
        if let Some(d) = &self.delta {
            if d.len() != agents {
                return Err(Error::DimensionMismatch { field: "delta".into(), detail: format!("{} budgets for {agents} agents", d.len()) });
            }
            if let Some(x) = d.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::InvalidInput(format!("power budget {x} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

fn mismatch(field: &str, detail: alloc::string::String) -> Error {
    Error::DimensionMismatch { field: field.into(), detail }
}

impl SystemModel {
    /// Validates every model invariant. A zero `J0` is normalized to "no prior".
    pub fn new(h: Mat, r: Mat, j0: Option<Mat>, u: Mat, g: Vec<Mat>, agent_dims: Vec<usize>) -> Result<Self> {
        let (n, l) = h.shape();
        if n == 0 || l == 0 {
            return Err(mismatch("H", format!("{n}×{l} has an empty dimension")));
        }
        check_finite(&h, "H")?;
        if agent_dims.is_empty() || agent_dims.contains(&0) {
            return Err(mismatch("agent_dims", format!("{agent_dims:?} must be non-empty positive counts")));
        }
        let total: usize = agent_dims.iter().sum();
        if total != n {
            return Err(mismatch("agent_dims", format!("sum {total} != N = {n}")));
        }
        if r.shape() != (n, n) {
            return Err(mismatch("R", format!("expected {n}×{n}, got {}×{}", r.nrows(), r.ncols())));
        }
        check_symmetric(&r, "R")?;
        let tol = Tolerance::default();
        if !linalg::is_pd(&r, &tol)? {
            return Err(Error::InvariantViolation("R must be symmetric positive definite".into()));
        }
        let j0 = match j0 {
            None => None,
            Some(j) => {
                if j.shape() != (l, l) {
                    return Err(mismatch("J0", format!("expected {l}×{l}, got {}×{}", j.nrows(), j.ncols())));
                }
                check_symmetric(&j, "J0")?;
                if j.iter().all(|&x| x == 0.0) {
                    None
                } else if linalg::is_pd(&j, &tol)? {
                    Some(j)
                } else {
                    return Err(Error::InvariantViolation("J0 must be zero (no prior) or positive definite".into()));
                }
            }
        };
        if u.ncols() != l {
            return Err(mismatch("U", format!("expected {l} columns, got {}", u.ncols())));
        }
        check_finite(&u, "U")?;
        if g.len() != agent_dims.len() {
            return Err(mismatch("G", format!("{} private maps for {} agents", g.len(), agent_dims.len())));
        }
        for (i, gi) in g.iter().enumerate() {
            if gi.ncols() != l {
                return Err(mismatch("G", format!("G[{i}] has {} columns, expected {l}", gi.ncols())));
            }
            check_finite(gi, "G")?;
        }
        if g.iter().all(|gi| gi.iter().all(|&x| x == 0.0)) {
            return Err(Error::InvariantViolation("at least one private map G_i must be non-zero".into()));
        }
        if j0.is_none() {
            if linalg::rank_tol(&h, &tol)? < l {
                return Err(Error::SingularModel("without a prior, H must have full column rank".into()));
            }
            let rinv_h = linalg::spd_solve(&r, &h, "R")?;
            let info = h.transpose() * rinv_h;
            if !linalg::is_pd(&linalg::symmetrize(&info), &tol)? {
                return Err(Error::SingularModel("HᵀR⁻¹H is not invertible".into()));
            }
        }
        Ok(Self { h, r, j0, u, g, agent_dims })
    }

    pub fn h(&self) -> &Mat {
        &self.h
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }
    /// Prior Fisher information, `None` when there is no prior.
    pub fn j0(&self) -> Option<&Mat> {
        self.j0.as_ref()
    }
    pub fn has_prior(&self) -> bool {
        self.j0.is_some()
    }
    pub fn u(&self) -> &Mat {
        &self.u
    }
    pub fn g(&self) -> &[Mat] {
        &self.g
    }
    pub fn agent_dims(&self) -> &[usize] {
        &self.agent_dims
    }
    /// Number of measurements `N`.
    pub fn n(&self) -> usize {
        self.h.nrows()
    }
    /// Parameter dimension `L`.
    pub fn l(&self) -> usize {
        self.h.ncols()
    }
    /// Number of agents `S`.
    pub fn agents(&self) -> usize {
        self.agent_dims.len()
    }

    pub fn g_is_zero(&self, i: usize) -> bool {
        self.g[i].iter().all(|&x| x == 0.0)
    }

    /// Vertical stack of all private maps.
    pub fn g_stacked(&self) -> Mat {
        let rows: usize = self.g.iter().map(|g| g.nrows()).sum();
        let mut out = Mat::zeros(rows, self.l());
        let mut r = 0;
        for g in &self.g {
            out.rows_mut(r, g.nrows()).copy_from(g);
            r += g.nrows();
        }
        out
    }

    pub fn agent_slice(&self, i: usize) -> Result<AgentSlice> {
        if i >= self.agents() {
            return Err(Error::AgentIndex { index: i, agents: self.agents() });
        }
        let start = self.agent_dims[..i].iter().sum();
        Ok(AgentSlice { agent_index: i, start, len: self.agent_dims[i] })
    }

    pub fn slices(&self) -> Vec<AgentSlice> {
        (0..self.agents()).map(|i| self.agent_slice(i).expect("in range")).collect()
    }

    /// Rows of `H` owned by agent `i`.
    pub fn h_block(&self, i: usize) -> Result<Mat> {
        let s = self.agent_slice(i)?;
        Ok(self.h.rows(s.start, s.len).into_owned())
    }

    /// Copy of the model with `R` replaced (validated again).
    pub fn with_r(&self, r: Mat) -> Result<Self> {
        Self::new(self.h.clone(), r, self.j0.clone(), self.u.clone(), self.g.clone(), self.agent_dims.clone())
    }

    /// Copy of the model with a different public map.
    pub fn with_u(&self, u: Mat) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), self.j0.clone(), u, self.g.clone(), self.agent_dims.clone())
    }

    /// Copy of the model with different private maps.
    pub fn with_g(&self, g: Vec<Mat>) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), self.j0.clone(), self.u.clone(), g, self.agent_dims.clone())
    }

    /// Copy of the model with a different agent partition.
    pub fn with_agent_dims(&self, agent_dims: Vec<usize>, g: Vec<Mat>) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), self.j0.clone(), self.u.clone(), g, agent_dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn scalar(h: f64) -> SystemModel {
        let m = |x| Mat::from_element(1, 1, x);
        SystemModel::new(m(h), m(1.0), None, m(1.0), vec![m(1.0)], vec![1]).unwrap()
    }

    #[test]
    fn scalar_model() {
        let m = scalar(1.0);
        assert_eq!((m.n(), m.l(), m.agents()), (1, 1, 1));
        assert!(!m.has_prior());
    }

    #[test]
    fn agent_dims_must_sum_to_n() {
        let h = Mat::identity(2, 1);
        let err = SystemModel::new(h, Mat::identity(2, 2), None, Mat::identity(1, 1), vec![Mat::identity(1, 1)], vec![1]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref field, .. } if field == "agent_dims"));
    }

    #[test]
    fn indefinite_r_rejected() {
        let r = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = SystemModel::new(Mat::identity(2, 2), r, None, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![2]).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn singular_prior_rejected_and_zero_prior_normalized() {
        let j = Mat::from_diagonal(&crate::Vector::from_vec(vec![1.0, 0.0]));
        let mk = |j0| SystemModel::new(Mat::identity(2, 2), Mat::identity(2, 2), j0, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![2]);
        assert!(matches!(mk(Some(j)), Err(Error::InvariantViolation(_))));
        assert!(!mk(Some(Mat::zeros(2, 2))).unwrap().has_prior());
    }

    #[test]
    fn rank_deficient_h_without_prior_rejected() {
        let h = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = SystemModel::new(h, Mat::identity(2, 2), None, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![2]).unwrap_err();
        assert!(matches!(err, Error::SingularModel(_)));
    }

    #[test]
    fn all_zero_private_maps_rejected() {
        let err = SystemModel::new(Mat::identity(1, 1), Mat::identity(1, 1), None, Mat::identity(1, 1), vec![Mat::zeros(1, 1)], vec![1]).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn slice_examples() {
        let h = Mat::identity(5, 2);
        let mut g = vec![Mat::zeros(1, 2); 2];
        g[0][(0, 0)] = 1.0;
        let m = SystemModel::new(h.clone(), Mat::identity(5, 5), Some(Mat::identity(2, 2)), Mat::identity(1, 2), g, vec![2, 3]).unwrap();
        assert_eq!(m.agent_slice(0).unwrap().range(), 0..2);
        assert_eq!(m.agent_slice(1).unwrap().range(), 2..5);
        assert!(matches!(m.agent_slice(2), Err(Error::AgentIndex { .. })));
        let m4 = SystemModel::new(Mat::identity(4, 2), Mat::identity(4, 4), None, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![4]).unwrap();
        assert_eq!(m4.agent_slice(0).unwrap().range(), 0..4);
    }

    proptest! {
        #[test]
        fn slices_partition_rows(dims in proptest::collection::vec(1usize..5, 1..6)) {
            let n: usize = dims.iter().sum();
            let g = vec![Mat::identity(1, 1); dims.len()];
            let m = SystemModel::new(Mat::from_element(n, 1, 1.0), Mat::identity(n, n), None, Mat::identity(1, 1), g, dims).unwrap();
            let mut next = 0;
            for s in m.slices() {
                prop_assert_eq!(s.start, next);
                next = s.range().end;
            }
            prop_assert_eq!(next, n);
        }
    }
}
