use crate::{Graph, GraphError, NodeId, Tensor};

/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeStatus {
    Checked,
    /// The central difference straddles (or starts on) a ReLU / max-pool branch
    /// change, so the function is not differentiable there. Excluded from the
    /// error statistics.
    Kink,
}

#[derive(Clone, Debug)]
pub struct FdProbe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: ProbeStatus,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub step: f64,
    pub tolerance: f64,
    pub probes: Vec<FdProbe>,
}

impl FdReport {
    pub fn checked(&self) -> impl Iterator<Item = &FdProbe> {
        self.probes.iter().filter(|p| p.status == ProbeStatus::Checked)
    }

    pub fn num_checked(&self) -> usize {
        self.checked().count()
    }

    pub fn num_kinks(&self) -> usize {
        self.probes.len() - self.num_checked()
    }

    /// Largest relative error over the non-kink probes (0 if none were checked).
    pub fn max_rel_error(&self) -> f64 {
        self.checked().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Compares reverse-mode gradients with central differences.
///
/// `build` must construct a fresh graph from the given parameter values and
/// return it together with the scalar loss node and the node ids of each
/// parameter (in the same order as `params`). `probes` lists
/// `(parameter, flat index)` pairs to check.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    probes: &[(usize, usize)],
    step: f64,
    tolerance: f64,
    mut build: F,
) -> Result<FdReport, GraphError>
where
    F: FnMut(&[Tensor]) -> Result<(Graph, NodeId, Vec<NodeId>), GraphError>,
{
    let (mut graph, loss, ids) = build(params)?;
    graph.backward(loss)?;
    let base_kink = graph.at_kink();
    let base_sig = graph.kink_signature();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|id| graph.grad(*id)).collect::<Result<_, _>>()?;
    drop(graph);

    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(probes.len());
    for &(p, idx) in probes {
        let original = work[p].data()[idx];
        let mut eval = |value: f64, work: &mut Vec<Tensor>| -> Result<(f64, u64), GraphError> {
            work[p].data_mut()[idx] = value;
            let (g, l, _) = build(work)?;
            Ok((g.value(l).item(), g.kink_signature()))
        };
        let (plus, sig_plus) = eval(original + step, &mut work)?;
        let (minus, sig_minus) = eval(original - step, &mut work)?;
        work[p].data_mut()[idx] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[p][idx];
        let status = if base_kink || sig_plus != base_sig || sig_minus != base_sig {
            ProbeStatus::Kink
        } else {
            ProbeStatus::Checked
        };
        out.push(FdProbe {
            param: p,
            index: idx,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
            status,
        });
    }
    Ok(FdReport { step, tolerance, probes: out })
}
