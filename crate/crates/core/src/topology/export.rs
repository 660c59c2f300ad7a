use std::fmt::Write;

use super::Topology;

/// One line per cable: `<a> <b> <bandwidth_bps> <latency_ns>`.
///
/// Node labels are `h<N>` for hosts and `tor<N>`, `agg<N>`, `core<N>` or
/// `sw<N>` for switches. Lines starting with `#` are comments.
pub fn export_edge_list(t: &Topology) -> String {
    let mut out = String::new();
    out.push_str("# a b bandwidth_bps latency_ns\n");
    for l in (0..t.links.len()).step_by(2) {
        let link = &t.links[l];
        let _ = writeln!(
            out,
            "{} {} {} {}",
            t.label(link.from),
            t.label(link.to),
            link.bandwidth_bps,
            link.latency.fmt_nanos()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LinkParams, TopologySpec};

    #[test]
    fn star_edge_list() {
        let t = Topology::build(&TopologySpec::Star { hosts: 2 }, LinkParams::default()).unwrap();
        assert_eq!(
            export_edge_list(&t),
            "# a b bandwidth_bps latency_ns\nh0 tor0 200000000000 1000.000\nh1 tor0 200000000000 1000.000\n"
        );
    }
}
