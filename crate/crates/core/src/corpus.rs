//! Benchmark programs shipped with the crate, with their expected final
//! data-object contents.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::program::{parse, LogicalProgram};

#[derive(Debug, Clone, Copy)]
pub struct CorpusProgram {
    pub name: &'static str,
    pub source: &'static str,
}

impl CorpusProgram {
    pub fn program(&self) -> LogicalProgram {
        match parse(self.source) {
            Ok((p, _)) => p,
            Err(d) => panic!("corpus program {} does not parse: {d:?}", self.name),
        }
    }

    /// Expected final words of every data object after a fault-free run.
    pub fn golden(&self) -> &'static BTreeMap<String, Vec<i32>> {
        &goldens()[self.name]
    }
}

/// The benchmark corpus.
pub const BENCHMARKS: &[CorpusProgram] = &[
    CorpusProgram {
        name: "loop_sum",
        source: include_str!("../corpus/loop_sum.s"),
    },
    CorpusProgram {
        name: "fibonacci",
        source: include_str!("../corpus/fibonacci.s"),
    },
    CorpusProgram {
        name: "string_copy",
        source: include_str!("../corpus/string_copy.s"),
    },
    CorpusProgram {
        name: "call_chain",
        source: include_str!("../corpus/call_chain.s"),
    },
    CorpusProgram {
        name: "table_walk",
        source: include_str!("../corpus/table_walk.s"),
    },
];

/// Small fixtures used by layout tests; no golden values.
pub const FIXTURES: &[CorpusProgram] = &[
    CorpusProgram {
        name: "fragment_af",
        source: include_str!("../corpus/fragment_af.s"),
    },
    CorpusProgram {
        name: "if_else",
        source: include_str!("../corpus/if_else.s"),
    },
];

static GOLDEN_JSON: &str = include_str!("../corpus/golden.json");

fn goldens() -> &'static BTreeMap<String, BTreeMap<String, Vec<i32>>> {
    static CELL: OnceLock<BTreeMap<String, BTreeMap<String, Vec<i32>>>> = OnceLock::new();
    CELL.get_or_init(|| serde_json::from_str(GOLDEN_JSON).expect("golden.json is valid"))
}

pub fn all() -> impl Iterator<Item = &'static CorpusProgram> {
    BENCHMARKS.iter().chain(FIXTURES)
}

pub fn find(name: &str) -> Option<&'static CorpusProgram> {
    all().find(|p| p.name == name)
}

pub fn get(name: &str) -> &'static CorpusProgram {
    find(name).unwrap_or_else(|| panic!("no corpus program `{name}`"))
}
