use gistill_core::corpus_io::{tokenize, SummarizationRecord};
use gistill_core::exec::Execution;
use gistill_core::rng;
use gistill_core::synthetic::joint_vocabulary;
use gistill_core::teacher::{soft_target_from_trace, train_toy_teacher, TeacherConfig};
use rand::Rng;

const K: usize = 3;

fn copy_corpus(n: usize, tag: &str) -> Vec<SummarizationRecord> {
    (0..n)
        .map(|i| {
            let id = format!("{tag}-{i}");
            let mut r = rng::stream(11, "copy-corpus", &id);
            let len = r.gen_range(8..=12);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", r.gen_range(0..30))).collect();
            SummarizationRecord { summary: words[..K].join(" "), article: words.join(" "), id }
        })
        .collect()
}

#[test]
fn copy_task_teacher_attends_to_the_copied_prefix() {
    let train = copy_corpus(400, "train");
    let held_out = copy_corpus(40, "held");
    let all: Vec<SummarizationRecord> = train.iter().chain(&held_out).cloned().collect();
    let vocab = joint_vocabulary(&all);
    let config = TeacherConfig {
        hidden_size: 64,
        heads: 2,
        ffn_dim: 64,
        encoder_layers: 1,
        decoder_layers: 1,
        max_len: 16,
        lr: 3e-3,
        dropout: 0.0,
        epochs: 10,
        ..TeacherConfig::default()
    };
    let trained = train_toy_teacher(&train, &vocab, &config, Execution::Parallel).unwrap();
    let teacher = &trained.members[0];
    let mut mass = 0.0;
    for rec in &held_out {
        let doc = tokenize(rec.id.clone(), &rec.article, &vocab).unwrap();
        let summary = tokenize(rec.id.clone(), &rec.summary, &vocab).unwrap();
        let q = soft_target_from_trace(&teacher.teacher_forced_trace(&doc, &summary.ids).unwrap()).unwrap().q;
        mass += q[..K].iter().sum::<f64>();
    }
    mass /= held_out.len() as f64;
    let curve = &trained.step_losses[0];
    assert!(curve[curve.len() - 1] < curve[0]);
    assert!(mass >= 0.6, "mass on the copied prefix {mass:.3}");
}
