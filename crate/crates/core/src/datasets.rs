//! Data shipped with the crate.

/// ASVS 4.0.3 in the nested export shape `ingest_asvs` reads.
pub const ASVS_4_0_3: &str = include_str!("../data/asvs-4.0.3.json");

/// Process-oriented sections removed before retrieval.
pub const EXCLUSIONS: &str = include_str!("../data/exclusions.json");

pub const EPURSE_FRS: &str = include_str!("../data/frs/epurse.jsonl");
pub const CPN_FRS: &str = include_str!("../data/frs/cpn.jsonl");
pub const GPS_FRS: &str = include_str!("../data/frs/gps.jsonl");

pub const PROJECTS: [&str; 3] = ["ePurse", "CPN", "GPS"];

/// Bundled FR dataset for a project id (case-insensitive).
pub fn bundled_frs(project: &str) -> Option<&'static str> {
    match project.to_ascii_lowercase().as_str() {
        "epurse" => Some(EPURSE_FRS),
        "cpn" => Some(CPN_FRS),
        "gps" => Some(GPS_FRS),
        _ => None,
    }
}
