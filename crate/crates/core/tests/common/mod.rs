#![allow(dead_code)]

use multirater::data::{self, GenConfig, MultiRaterCase, Split};
use multirater::network::NetworkConfig;

/// In-memory synthetic cases (erode, identity, dilate raters).
pub fn cases(n: usize, size: usize, seed: u64) -> Vec<MultiRaterCase> {
    let cfg = GenConfig {
        num_cases: n,
        image_size: size,
        se_radius: 1,
        seed,
        ..Default::default()
    };
    (0..n)
        .map(|i| {
            let s = data::synthesize_case(&cfg, i).unwrap();
            MultiRaterCase {
                case_id: format!("c{i}"),
                image: data::normalize_image(&s.raw_image),
                rater_masks: s.rater_masks,
                rater_ids: None,
                split: Split::Train,
            }
        })
        .collect()
}

pub fn tiny_net(m: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 2,
        base_channels: 4,
        num_branches: m,
        ..Default::default()
    }
}
