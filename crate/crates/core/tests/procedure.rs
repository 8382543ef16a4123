//! Prompt-sequence invariants and manifest serialization.

use std::path::Path;

use proptest::prelude::*;

use procdiff::procedure::{make_prompt_sequence, Manifest, Modality, Placement, PromptScenario, Recipe, Split, Step};
use procdiff::Error;

fn recipe(id: &str, n: usize, split: Split) -> Recipe {
    Recipe {
        recipe_id: id.into(),
        split,
        steps: (1..=n)
            .map(|i| Step::new(i, format!("step {i} of {id}")).with_image(format!("images/{id}/{i}.png")))
            .collect(),
        label: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn text_and_image_positions_partition_the_recipe(
        n in 1usize..16, p in 0.0f64..1.0, random in any::<bool>(), seed in 0u64..1000
    ) {
        let placement = if random { Placement::Random } else { Placement::Ordered };
        let seq = make_prompt_sequence(
            &recipe("r", n, Split::Train),
            &PromptScenario::multimodal(p, placement, seed),
            Path::new("/root"),
        ).unwrap();
        prop_assert_eq!(seq.n_text() + seq.n_image(), n);
        let mut all: Vec<usize> = seq.text_positions.iter().chain(&seq.image_positions).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (1..=n).collect::<Vec<_>>());
        let k = (p * n as f64 - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(seq.n_image(), k.min(n));
        if !random {
            prop_assert_eq!(&seq.image_positions, &(1..=seq.n_image()).collect::<Vec<_>>());
        }
        for e in &seq.entries {
            prop_assert_eq!(e.image.is_some(), e.modality == Modality::Image);
        }
    }

    #[test]
    fn random_placement_is_reproducible(n in 1usize..16, p in 0.0f64..1.0, seed in 0u64..1000) {
        let sc = PromptScenario::multimodal(p, Placement::Random, seed);
        let r = recipe("r", n, Split::Train);
        let a = make_prompt_sequence(&r, &sc, Path::new(".")).unwrap();
        let b = make_prompt_sequence(&r, &sc, Path::new(".")).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn manifest_survives_jsonl(sizes in prop::collection::vec(1usize..8, 1..6)) {
        let recipes: Vec<Recipe> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| recipe(&format!("v{i:02}"), n, if i % 3 == 2 { Split::Validation } else { Split::Train }))
            .rev()
            .collect();
        let m = Manifest::new(".", recipes).unwrap();
        let parsed: Vec<Recipe> = m
            .to_jsonl()
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        prop_assert_eq!(&parsed, &m.recipes);
        let ids: Vec<&str> = parsed.iter().map(|r| r.recipe_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        prop_assert_eq!(ids, sorted);
        prop_assert_eq!(
            m.pair_count(Split::Train) + m.pair_count(Split::Validation),
            sizes.iter().sum::<usize>()
        );
    }
}

#[test]
fn image_history_needs_every_keyframe() {
    let mut r = recipe("r", 4, Split::Train);
    r.steps[2].image_ref = None;
    match make_prompt_sequence(&r, &PromptScenario::image_history(), Path::new(".")) {
        Err(Error::Coverage {
            required: 4,
            available: 3,
            ..
        }) => {}
        other => panic!("expected coverage error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let a = recipe("same", 2, Split::Train);
    assert!(matches!(
        Manifest::new(".", vec![a.clone(), a]),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn missing_keyframe_file_is_referential() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    Manifest::new(dir.path(), vec![recipe("r", 2, Split::Train)])
        .unwrap()
        .save(&path)
        .unwrap();
    assert!(matches!(
        procdiff::procedure::load_manifest(&path),
        Err(Error::Referential(_))
    ));
}
