use std::sync::Arc;

use closet_core::recommendation::{recommend_outfit, Setting};
use closet_core::synth::{cluster_hit_rate, style_cluster_task, StyleClusterSpec};
use closet_core::transformer::{train, PlacedItem, TrainConfig, TransformerConfig, TransformerParams};
use closet_core::{Category, VectorIndex};

#[test]
fn desk_model_learns_the_style_clusters() {
    let task = style_cluster_task(&StyleClusterSpec::default());
    let init = TransformerParams::init(TransformerConfig::desk(32), 11).unwrap();
    let cfg = TrainConfig { seed: 11, ..TrainConfig::desk() };
    let (params, report) = train(&init, &task.catalog, &task.train_outfits, &cfg).unwrap();
    assert_eq!(report.loss_trace.len(), 50);
    let ratio = report.loss_ratio().unwrap();
    assert!(ratio < 0.5, "final/initial loss {ratio}");

    let index = VectorIndex::flat(Arc::clone(task.catalog.store())).unwrap();
    for n_out in [1, 2, 9] {
        let before = cluster_hit_rate(&task, &init, &index, n_out, 7).unwrap();
        let after = cluster_hit_rate(&task, &params, &index, n_out, 7).unwrap();
        assert!(after >= 0.7, "{n_out} OUT slots: {after}");
        assert!(after > before + 0.3);
    }

    // Tone sur tone returns the brute-force top-1 of each target category.
    for id in task.held_out.iter().take(30) {
        let item = task.catalog.get(id).unwrap();
        let targets: Vec<Category> = Category::ALL.into_iter().filter(|&c| c != item.category).collect();
        let out = recommend_outfit(&task.catalog, &index, &params, id, &targets, Setting::ToneSurTone, 0).unwrap();
        let reference = PlacedItem {
            category: item.category,
            id: id.clone(),
            embedding: task.catalog.embedding(item).to_vec(),
        };
        for (c, pred) in params.recommend_embeddings(&reference, &targets).unwrap() {
            let best = task
                .catalog
                .items_by_category(c)
                .map(|it| {
                    let s: f64 = task.catalog.embedding(it).iter().zip(&pred).map(|(a, b)| *a as f64 * *b as f64).sum();
                    (s, it.id.as_str())
                })
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(a.1)))
                .unwrap();
            assert_eq!(out[&c], best.1);
        }
    }

    let back = TransformerParams::decode(&params.encode()).unwrap();
    let id = &task.held_out[3];
    let t = [Category::Shoes, Category::Bags];
    let t: Vec<Category> = t.into_iter().filter(|&c| Some(c) != task.catalog.get(id).map(|i| i.category)).collect();
    // Persistence stores f32, so compare recommendations rather than raw values.
    assert_eq!(
        recommend_outfit(&task.catalog, &index, &back, id, &t, Setting::ToneSurTone, 0).unwrap(),
        recommend_outfit(&task.catalog, &index, &params, id, &t, Setting::ToneSurTone, 0).unwrap()
    );
}
