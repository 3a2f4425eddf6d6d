#![allow(dead_code)]
//! Small trained policy shared by the decoding and RL integration tests.

use sidrec::corpusgen::{render_alignment_example, sequence_prompt, AlignmentExample, CaseInput};
use sidrec::dataio::{build_split_sequences, synth_dataset, Item, SplitExample, SynthConfig};
use sidrec::policy::{build_vocab, train_sft, Policy, PolicyConfig, SftSchedule, SftStage};
use sidrec::quantizer::SidAssignment;
use sidrec::sidspace::{build_trie, SemanticId, SidTrie};

pub struct Fixture {
    pub items: Vec<Item>,
    pub assignment: SidAssignment,
    pub trie: SidTrie,
    pub train: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
    pub policy: Policy,
}

impl Fixture {
    pub fn item(&self, id: &str) -> &Item {
        self.items.iter().find(|i| i.item_id == id).unwrap()
    }

    pub fn sids(&self, ids: &[String]) -> Vec<String> {
        ids.iter().map(|i| self.assignment.render(i).unwrap()).collect()
    }

    pub fn prompt(&self, ex: &SplitExample) -> Vec<u32> {
        self.policy.vocab.encode(&sequence_prompt(&self.sids(&ex.history)))
    }
}

/// 48 items over 4 categories; the first code is the category, so the
/// planted Markov structure is visible in the SID prefix.
pub fn fixture(epochs: usize) -> Fixture {
    let cfg = SynthConfig {
        n_items: 48,
        n_users: 60,
        n_categories: 4,
        seq_len_min: 4,
        seq_len_max: 7,
        seed: 5,
        ..SynthConfig::default()
    };
    let (items, rows) = synth_dataset(&cfg).unwrap();
    let mut cats: Vec<&str> = items.iter().map(|i| i.category.as_str()).collect();
    cats.sort();
    cats.dedup();
    let mut per_cat = vec![0u32; cats.len()];
    let assignment = SidAssignment::from_entries(
        3,
        4,
        items.iter().map(|it| {
            let c = cats.iter().position(|c| *c == it.category).unwrap();
            let n = per_cat[c];
            per_cat[c] += 1;
            (it.item_id.clone(), SemanticId::new(vec![c as u32, n % 4, n / 4], 0))
        }),
    );
    let trie = build_trie(&assignment).unwrap();
    let (split, _) = build_split_sequences(&rows, 5, [0.8, 0.1, 0.1]).unwrap();
    let by_id = |id: &str| items.iter().find(|i| i.item_id == id).unwrap();
    let mut corpus: Vec<AlignmentExample> = Vec::new();
    for it in &items {
        corpus.push(render_alignment_example(1, CaseInput::Item(it), &assignment).unwrap());
    }
    for ex in &split.train {
        let hist: Vec<&Item> = ex.history.iter().map(|h| by_id(h)).collect();
        let next = by_id(&ex.target);
        corpus.push(render_alignment_example(5, CaseInput::Sequence { history: &hist, next }, &assignment).unwrap());
    }
    let vocab = build_vocab(&corpus, assignment.vocab(), 1);
    let pc = PolicyConfig {
        layers: 1,
        heads: 2,
        width: 16,
        ff_width: 32,
        context_len: 128,
        seed: 9,
    };
    let policy = Policy::init(pc, vocab).unwrap();
    let sched = SftSchedule {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: epochs,
        ..SftSchedule::default()
    };
    let policy = train_sft(policy, &corpus, SftStage::Alignment, &sched, &[], None).unwrap().policy;
    Fixture {
        items,
        assignment,
        trie,
        train: split.train,
        test: split.test,
        policy,
    }
}
