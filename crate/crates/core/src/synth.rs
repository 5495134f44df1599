//! Seeded synthetic case generator.
//!
//! Disease counts are apportioned by largest remainder, so the histogram
//! matches the mix up to rounding, and then shuffled. Each case draws
//! lesion attributes from the disease's ranges; the gold route follows
//! fixed rules over those attributes and the gold plan is the
//! taxonomy's operative agenda for that route.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{
    canonicalize_route, DiseaseLabel, MriReport, PhaseId, RouteLabel, SurgicalCase,
};
use crate::vocab::Vocabulary;

pub const ROUTE_EET: &str = "endoscopic endonasal transsphenoidal";
pub const ROUTE_MTS: &str = "microscopic transsphenoidal";
pub const ROUTE_CRANIOTOMY: &str = "craniotomy";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("disease mix must have non-negative finite weights, not all zero")]
    InvalidMix,
    #[error("case count must be at least 1")]
    InvalidCount,
    #[error("route `{0}` is missing from the vocabulary")]
    UnknownRoute(String),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::InvalidMix => "InvalidMix",
            SynthError::InvalidCount => "InvalidConfig",
            SynthError::UnknownRoute(_) => "InvalidConfig",
        }
    }
}

/// Uniform mix over D1..D5.
pub fn uniform_mix() -> BTreeMap<DiseaseLabel, f64> {
    DiseaseLabel::KNOWN.iter().map(|d| (d.clone(), 1.0)).collect()
}

/// Largest-remainder apportionment of `n` over the weights. Ties in the
/// remainder go to the earlier label.
pub fn apportion(n: usize, mix: &BTreeMap<DiseaseLabel, f64>) -> Result<BTreeMap<DiseaseLabel, usize>, SynthError> {
    if mix.values().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(SynthError::InvalidMix);
    }
    let total: f64 = mix.values().sum();
    if total <= 0.0 {
        return Err(SynthError::InvalidMix);
    }
    let mut counts = BTreeMap::new();
    let mut rems: Vec<(f64, &DiseaseLabel)> = Vec::new();
    let mut assigned = 0;
    for (d, w) in mix {
        // Remainders are kept as `n·w mod total`, which is exact for
        // integer weights, so equal fractions tie exactly.
        let scaled = n as f64 * w;
        let rem = scaled.rem_euclid(total);
        let floor = ((scaled - rem) / total).round() as usize;
        assigned += floor;
        counts.insert(d.clone(), floor);
        rems.push((rem, d));
    }
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    for (_, d) in rems.into_iter().take(n - assigned) {
        *counts.get_mut(d).expect("present") += 1;
    }
    Ok(counts)
}

/// Gold route for a disease and its lesion attributes.
pub fn gold_route_for(disease: &DiseaseLabel, size_mm: u32, knosp: u32, shape: &str, prior: &str) -> &'static str {
    match disease {
        DiseaseLabel::D3 if size_mm >= 40 || knosp >= 4 => ROUTE_CRANIOTOMY,
        DiseaseLabel::D1 | DiseaseLabel::D2 if size_mm >= 45 && shape == "dumbbell" => ROUTE_CRANIOTOMY,
        DiseaseLabel::D5 if prior == "microscopic" => ROUTE_MTS,
        _ => ROUTE_EET,
    }
}

struct Draw {
    size_mm: u32,
    knosp: u32,
    shape: &'static str,
    location: &'static str,
    prior: &'static str,
    age: u32,
    sex: &'static str,
}

fn draw(rng: &mut ChaCha8Rng, disease: &DiseaseLabel) -> Draw {
    let (size_mm, knosp) = match disease {
        DiseaseLabel::D3 => (rng.gen_range(18..=55), rng.gen_range(2..=4)),
        DiseaseLabel::D4 | DiseaseLabel::D5 => (rng.gen_range(3..=18), rng.gen_range(0..=2)),
        _ => (rng.gen_range(10..=55), rng.gen_range(0..=3)),
    };
    let shape = match disease {
        DiseaseLabel::D1 | DiseaseLabel::D2 if rng.gen_bool(0.25) => "dumbbell",
        _ => *["round", "lobulated"].choose(rng).expect("non-empty"),
    };
    let location = if size_mm >= 30 {
        "sellar-suprasellar"
    } else if size_mm >= 10 {
        "sellar with suprasellar extension"
    } else {
        "intrasellar"
    };
    let prior = match disease {
        DiseaseLabel::D2 | DiseaseLabel::D5 => *["endoscopic", "microscopic"].choose(rng).expect("non-empty"),
        _ => "none",
    };
    Draw {
        size_mm,
        knosp,
        shape,
        location,
        prior,
        age: rng.gen_range(24..=78),
        sex: *["female", "male"].choose(rng).expect("non-empty"),
    }
}

fn presentation(disease: &DiseaseLabel, d: &Draw, rng: &mut ChaCha8Rng) -> String {
    let years = rng.gen_range(2..=9);
    match disease {
        DiseaseLabel::D1 => "Progressive bitemporal visual field loss and frontal headache over several months.".to_string(),
        DiseaseLabel::D2 => format!(
            "Recurrent visual disturbance {years} years after {} resection of a non-functioning adenoma.",
            d.prior
        ),
        DiseaseLabel::D3 => "Rapidly progressive headache and diplopia; tumour regrowth despite prior treatment.".to_string(),
        DiseaseLabel::D4 => "Weight gain, easy bruising and hypertension; elevated ACTH and cortisol.".to_string(),
        DiseaseLabel::D5 => format!(
            "Recurrent hypercortisolism {years} years after {} surgery for Cushing disease.",
            d.prior
        ),
        DiseaseLabel::Other(name) => format!("Referred for a sellar lesion ({name})."),
    }
}

/// Generates `n` cases. Identical `(n, seed, mix)` give identical output.
pub fn generate_synthetic_cases(
    n: usize,
    seed: u64,
    mix: &BTreeMap<DiseaseLabel, f64>,
    vocab: &Vocabulary,
) -> Result<Vec<SurgicalCase>, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidCount);
    }
    let counts = apportion(n, mix)?;
    let mut routes: BTreeMap<&str, RouteLabel> = BTreeMap::new();
    for r in [ROUTE_EET, ROUTE_MTS, ROUTE_CRANIOTOMY] {
        let label = canonicalize_route(r, &vocab.route_aliases).map_err(|_| SynthError::UnknownRoute(r.into()))?;
        if vocab.taxonomy.base_agenda(PhaseId::SurgicalOperation, Some(&label)).is_empty() {
            return Err(SynthError::UnknownRoute(r.into()));
        }
        routes.insert(r, label);
    }

    let mut labels: Vec<DiseaseLabel> = counts
        .iter()
        .flat_map(|(d, c)| std::iter::repeat_n(d.clone(), *c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let mut cases = Vec::with_capacity(n);
    for (i, disease) in labels.into_iter().enumerate() {
        let d = draw(&mut rng, &disease);
        let route = routes[gold_route_for(&disease, d.size_mm, d.knosp, d.shape, d.prior)].clone();
        let history = presentation(&disease, &d, &mut rng);
        let kind = if d.size_mm < 10 { "microadenoma" } else { "macroadenoma" };
        let findings = format!(
            "A {} mm {} {} lesion, Knosp grade {}, displacing the optic apparatus {}.",
            d.size_mm,
            d.shape,
            d.location,
            d.knosp,
            if d.size_mm >= 20 { "upward" } else { "minimally" }
        );
        let impression = format!("Findings consistent with a pituitary {kind}.");
        let lesion_attributes = [
            ("size_mm", d.size_mm.to_string()),
            ("knosp_grade", d.knosp.to_string()),
            ("shape", d.shape.to_string()),
            ("location", d.location.to_string()),
            ("prior_approach", d.prior.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let gold_plan = vocab
            .taxonomy
            .base_agenda(PhaseId::SurgicalOperation, Some(&route))
            .iter()
            .filter_map(|id| vocab.taxonomy.plan_step(id))
            .collect();
        let gold_subtasks = PhaseId::ALL
            .iter()
            .map(|p| (*p, vocab.taxonomy.base_agenda(*p, Some(&route))))
            .collect();
        cases.push(SurgicalCase {
            case_id: format!("syn-{seed}-{i:04}"),
            demographics: [("age".to_string(), d.age.to_string()), ("sex".to_string(), d.sex.to_string())]
                .into_iter()
                .collect(),
            history,
            mri_report: Some(MriReport {
                findings,
                impression,
                lesion_attributes,
            }),
            disease_label: disease,
            gold_route: route,
            gold_plan,
            gold_subtasks,
            extra: BTreeMap::new(),
        });
    }
    Ok(cases)
}
