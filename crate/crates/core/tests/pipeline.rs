//! End-to-end: assemble, diversify, serialize, reload and run every
//! benchmark fault-free.

use divex_core::corpus::BENCHMARKS;
use divex_core::diversifier::{diversify, BuildOptions};
use divex_core::image::ImageContainer;
use divex_core::monitor::{run_to_completion, MonitorConfig, Outcome};

#[test]
fn benchmarks_survive_a_container_round_trip_and_run_clean() {
    for bench in BENCHMARKS {
        for replicas in 2..=4 {
            let program = bench.program();
            let cfg = BuildOptions { replicas, ..BuildOptions::default() }.to_config().unwrap();
            let built = diversify(&program, &cfg).unwrap();
            let container = ImageContainer::new(program, cfg, built.images, built.certificate);
            let text = container.to_json();
            let reloaded = ImageContainer::from_json(&text).unwrap();
            assert_eq!(reloaded.to_json(), text, "{} N={replicas}", bench.name);

            let images = &reloaded.images;
            let report = run_to_completion(images, &MonitorConfig::for_images(images), &[], 1_000_000, &mut ()).unwrap();
            assert_eq!(report.outcome, Outcome::Clean, "{} N={replicas}", bench.name);
            assert!(report.traces.windows(2).all(|w| w[0].records == w[1].records));
            for (img, state) in images.iter().zip(&report.states) {
                for (name, words) in bench.golden() {
                    assert_eq!(state.object_words(img, name).as_ref(), Some(words), "{} {name}", bench.name);
                }
            }
        }
    }
}

#[test]
fn rejects_a_container_of_another_format() {
    let program = BENCHMARKS[0].program();
    let cfg = BuildOptions::default().to_config().unwrap();
    let built = diversify(&program, &cfg).unwrap();
    let text = ImageContainer::new(program, cfg, built.images, built.certificate).to_json();
    let other = text.replacen(&format!("\"{}\"", divex_core::image::CONTAINER_FORMAT), "\"other/0\"", 1);
    assert!(ImageContainer::from_json(&other).is_err());
}
