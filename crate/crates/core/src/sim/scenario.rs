//! Built-in workloads.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HotPage, Phase, SimError, SimWorkload};

pub const SCENARIOS: [&str; 4] = ["phased-graph", "stable-hot", "shifting-hot", "uniform-cold"];

const PAGES: u32 = 2048;
const PAGE_MB: u32 = 2;
const FAST_PAGES: u32 = 512;

/// Picks `count` distinct pages with Zipf-like weights of exponent `skew`
/// (0 gives uniform weights).
fn hot_set(rng: &mut ChaCha8Rng, pages: u32, count: usize, skew: f64) -> Vec<HotPage> {
    let ids = sample(rng, pages as usize, count);
    let raw: Vec<f64> = (0..count).map(|r| 1.0 / ((r + 1) as f64).powf(skew)).collect();
    let total: f64 = raw.iter().sum();
    ids.iter()
        .zip(raw)
        .map(|(page, w)| HotPage {
            page: page as u32,
            weight: w / total,
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn phase(
    name: &str,
    duration: u32,
    hot: Vec<HotPage>,
    hot_mass: f64,
    drift: f64,
    base_ipc: f64,
    cache: (f64, f64),
    read_fraction: f64,
) -> Phase {
    Phase {
        name: name.to_string(),
        duration,
        page_count: PAGES,
        hot_set: hot,
        hot_mass,
        hot_set_drift: drift,
        base_ipc,
        cache_profile: cache,
        read_fraction,
    }
}

/// Builds a named scenario. The same `(name, seed)` always yields the same workload.
///
/// * `phased-graph`: a low-reuse generation phase, a construction phase whose
///   hot set exceeds fast memory, and a traversal phase with a small drifting
///   hot set.
/// * `stable-hot`: one static hot set that fits in fast memory.
/// * `shifting-hot`: two phases with hot sets that drift every interval.
/// * `uniform-cold`: uniform random access over all pages.
pub fn make_scenario(name: &str, seed: u64) -> Result<SimWorkload, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5ce0_a210);
    let phases = match name {
        "phased-graph" => vec![
            phase(
                "generation",
                20,
                hot_set(&mut rng, PAGES, 300, 0.0),
                0.15,
                0.3,
                1.6,
                (0.80, 0.55),
                0.45,
            ),
            phase(
                "construction",
                60,
                hot_set(&mut rng, 1100, 800, 0.0),
                0.9,
                0.02,
                1.2,
                (0.55, 0.35),
                0.6,
            ),
            phase(
                "bfs",
                60,
                hot_set(&mut rng, PAGES, 160, 0.6),
                0.95,
                0.12,
                1.0,
                (0.35, 0.20),
                0.9,
            ),
        ],
        "stable-hot" => vec![phase(
            "static",
            100,
            hot_set(&mut rng, PAGES, 256, 0.0),
            0.9,
            0.0,
            1.4,
            (0.6, 0.4),
            0.7,
        )],
        "shifting-hot" => vec![
            phase(
                "shift-a",
                50,
                hot_set(&mut rng, PAGES, 256, 0.0),
                0.9,
                0.1,
                1.3,
                (0.5, 0.3),
                0.75,
            ),
            phase(
                "shift-b",
                50,
                hot_set(&mut rng, PAGES, 256, 0.0),
                0.9,
                0.2,
                1.3,
                (0.45, 0.3),
                0.75,
            ),
        ],
        "uniform-cold" => vec![phase(
            "uniform",
            100,
            Vec::new(),
            0.0,
            0.0,
            1.1,
            (0.3, 0.15),
            0.5,
        )],
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    let wl = SimWorkload {
        name: name.to_string(),
        phases,
        seed,
        page_mb: PAGE_MB,
        fast_capacity: FAST_PAGES,
    };
    wl.validate()?;
    Ok(wl)
}
