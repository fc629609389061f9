use kerm_core::agent::{init_model_params, Agent, FactsMode, ModelCfg};
use kerm_core::kb::{parse_records, KnowledgeBase, Lexicon};
use kerm_core::retrieval::{EmbeddingProviderSpec, FactIndex};
use kerm_core::sim::gen::{gen_world, GenConfig};
use kerm_core::train::{train, evaluate, EvalConfig, Optimizer, Phase, TrainConfig, TrainSet};
use kerm_core::vocab;

#[test]
#[ignore]
fn lr_sweep() {
    let g = gen_world(&GenConfig { seed: 11, nodes: 30, train_episodes: 30, eval_episodes: 8, ..GenConfig::default() }).unwrap();
    let lex = Lexicon::from_pairs(vocab::default_lexicon_pairs()).unwrap();
    let lines: Vec<std::io::Result<String>> = g.records.iter().map(|r| Ok(serde_json::to_string(r).unwrap())).collect();
    let parsed = parse_records(lines.into_iter(), &lex).unwrap();
    let kb = KnowledgeBase::build(parsed.facts);
    let provider = EmbeddingProviderSpec::hash_bag(64, 7).unwrap();
    let index = FactIndex::build(&kb, &provider).unwrap();
    let cfg = ModelCfg { facts_mode: FactsMode::Facts, ..ModelCfg::default() };
    let agent = Agent::new(&g.world, Some(&index), provider, cfg).unwrap();
    let agents = vec![agent];
    let train_eps = vec![g.train.clone()];
    let eval_eps = vec![g.eval.clone()];

    for (lr, tf, opt) in [(0.001, 0.7, Optimizer::Adam), (0.0003, 0.7, Optimizer::Adam), (0.001, 0.4, Optimizer::Adam)] {
        let set = TrainSet { agents: &agents, episodes: &train_eps };
        let mut params = init_model_params(3, vocab::size(), &cfg, Some(&provider));
        for round in 0..3 {
            let tc = TrainConfig { phase: Phase::Finetune, iterations: 250, batch: 4, max_steps: 8, teacher_forcing: tf, lr, optimizer: opt, seed: 100 + round, ..TrainConfig::default() };
            let mut log = Vec::new();
            train(&set, &mut params, &tc, &mut log).unwrap();
            let text = String::from_utf8(log).unwrap();
            let saps: Vec<f64> = text.lines().filter(|l| l.contains(",sap,")).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
            let tail_mean: f64 = saps[saps.len()-50..].iter().sum::<f64>() / 50.0;
            let ev_train = evaluate(&set, &params, &EvalConfig { max_steps: 15, ..EvalConfig::default() }).unwrap();
            let es = TrainSet { agents: &agents, episodes: &eval_eps };
            let ev_held = evaluate(&es, &params, &EvalConfig { max_steps: 15, ..EvalConfig::default() }).unwrap();
            eprintln!("lr={lr} tf={tf} opt={opt:?} iters={}: sap(tail50) {tail_mean:.3}, train SR {:.1}, held SR {:.1}",
                (round+1)*250, ev_train.report.sr*100.0, ev_held.report.sr*100.0);
        }
    }
}
