//! Diagnostics over decoded output.

use mtkd_core::corpus::Corpus;
use mtkd_core::metrics::SubstitutionTally;
use mtkd_core::training::EvalReport;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::Result;

/// Homophone confusions among the substitution errors of one report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomophoneDiagnostic {
    pub tally: SubstitutionTally,
    /// Partner share expected if substitutions were uniform.
    pub uniform_rate: Option<f64>,
    /// One-sided `P(X >= to_partner)`. Under uniform substitution only the
    /// `with_partner` substitutions can hit a partner, each with chance
    /// `1/(z-1)`, so `X ~ Binomial(with_partner, 1/(z-1))`.
    pub p_value: Option<f64>,
}

pub fn homophone_diagnostic(corpus: &Corpus, report: &EvalReport) -> Result<HomophoneDiagnostic> {
    let mut tally = SubstitutionTally::default();
    for s in &report.sentences {
        tally.add(&s.reference, &s.hypothesis, |t| corpus.spec.partner(t));
    }
    let z = corpus.vocab.content_size();
    let uniform_rate = tally.uniform_rate(z);
    let p_value = match tally.with_partner {
        0 => None,
        n => Some(binomial_upper_tail(tally.to_partner, n, 1.0 / (z - 1) as f64)?),
    };
    Ok(HomophoneDiagnostic {
        tally,
        uniform_rate,
        p_value,
    })
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    let dist = Binomial::new(p, n as u64).map_err(|e| mtkd_core::Error::InvalidConfig(format!("binomial test: {e}")))?;
    Ok(dist.sf(k as u64 - 1))
}
