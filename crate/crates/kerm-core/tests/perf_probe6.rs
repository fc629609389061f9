use kerm_core::agent::{init_model_params, ActionLevel, Agent, FactsMode, ModelCfg};
use kerm_core::kb::{parse_records, KnowledgeBase, Lexicon};
use kerm_core::retrieval::{EmbeddingProviderSpec, FactIndex};
use kerm_core::sim::gen::{gen_world, GenConfig};
use kerm_core::train::{evaluate, EvalConfig, TrainSet};
use kerm_core::vocab;

#[test]
#[ignore]
fn untrained_policy_eval() {
    let mut worlds = Vec::new();
    let mut eval_eps = Vec::new();
    let mut all_records = Vec::new();
    for w in 0..5u64 {
        let g = gen_world(&GenConfig { seed: 11 + w, nodes: 40, train_episodes: 40, eval_episodes: 10, tag: format!("w{w}"), ..GenConfig::default() }).unwrap();
        worlds.push(g.world);
        eval_eps.push(g.eval);
        all_records.extend(g.records);
    }
    let lex = Lexicon::from_pairs(vocab::default_lexicon_pairs()).unwrap();
    let lines: Vec<std::io::Result<String>> = all_records.iter().map(|r| Ok(serde_json::to_string(r).unwrap())).collect();
    let parsed = parse_records(lines.into_iter(), &lex).unwrap();
    let kb = KnowledgeBase::build(parsed.facts);
    let provider = EmbeddingProviderSpec::hash_bag(64, 7).unwrap();
    let index = FactIndex::build(&kb, &provider).unwrap();
    let cfg = ModelCfg { facts_mode: FactsMode::Facts, action_level: ActionLevel::Local, ..ModelCfg::default() };
    let agents: Vec<Agent> = worlds.iter().map(|w| Agent::new(w, Some(&index), provider.clone(), cfg).unwrap()).collect();
    let set = TrainSet { agents: &agents, episodes: &eval_eps };
    let params = init_model_params(3, vocab::size(), &cfg, Some(&provider));
    let ev = evaluate(&set, &params, &EvalConfig { max_steps: 15, ..EvalConfig::default() }).unwrap();
    eprintln!("untrained held-out: SR {:.1} OSR {:.1} NE {:.2} TL {:.1}",
        ev.report.sr*100.0, ev.report.osr*100.0, ev.report.ne, ev.report.tl);
}
