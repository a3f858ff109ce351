//! Accumulator walkthrough.

use std::path::Path;

use anyhow::Context;
use pirdsn::aca::Side;
use pirdsn::proofs::{make_deletion_proof, make_upload_proof};
use pirdsn::{AcaState, Fid, ProofChain, RootVector, StateProof};
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Script {
    ops: Vec<DemoOp>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoOp {
    op: Kind,
    /// File content; the FID is its hash.
    file: String,
}

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Insert,
    Delete,
}

fn six_uploads() -> Script {
    Script { ops: (1..=6).map(|i| DemoOp { op: Kind::Insert, file: format!("FID{i}") }).collect() }
}

fn roots(v: &RootVector) -> String {
    let parts: Vec<String> =
        v.0.iter().enumerate().map(|(i, r)| format!("r{i}={}", r.map_or("-".to_string(), |d| d.short()))).collect();
    format!("({})", parts.join(", "))
}

pub fn run(path: Option<&Path>) -> Result<u8, Failure> {
    let script = match path {
        None => six_uploads(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    if script.ops.is_empty() {
        return Err(Failure::usage(anyhow::anyhow!("no operations")));
    }
    let mut state = AcaState::new();
    let mut chain = ProofChain::new(0);
    let mut failed = false;
    println!("gen {}", roots(&state.roots()));
    for (step, op) in script.ops.iter().enumerate() {
        let fid = Fid::of(op.file.as_bytes());
        let proof = match op.op {
            Kind::Insert => make_upload_proof(&mut state, fid, chain.head()).map(StateProof::Upload),
            Kind::Delete => make_deletion_proof(&mut state, &fid, chain.head()).map(StateProof::Deletion),
        };
        let proof = match proof {
            Ok(p) => p,
            Err(e) => {
                println!("{:>3} {:?} {} refused: {e}", step + 1, op.op, op.file);
                failed = true;
                continue;
            }
        };
        let verdict = chain.extend(&proof);
        failed |= verdict.is_err();
        match &proof {
            StateProof::Upload(u) => {
                let sides: String =
                    u.witness.path.iter().map(|n| if n.side == Side::Left { 'L' } else { 'R' }).collect();
                println!(
                    "{:>3} insert {} fid {} -> index {} (tree {}, path {})",
                    step + 1,
                    op.file,
                    fid.to_string().get(..12).unwrap_or_default(),
                    u.index,
                    u.tree_index,
                    if sides.is_empty() { "-".into() } else { sides },
                );
            }
            StateProof::Deletion(d) => {
                println!(
                    "{:>3} delete {} fid {} from tree {} leaf {}",
                    step + 1,
                    op.file,
                    fid.to_string().get(..12).unwrap_or_default(),
                    d.tree_index,
                    d.leaf_position
                );
            }
        }
        println!(
            "    roots {} proof {} {}",
            roots(proof.roots()),
            proof.digest().short(),
            match verdict {
                Ok(()) => "verified".to_string(),
                Err(e) => format!("REJECTED: {e}"),
            }
        );
    }
    println!("final mapping:");
    for (index, fid) in state.indexed_fids() {
        let name = script.ops.iter().map(|o| &o.file).find(|f| Fid::of(f.as_bytes()) == fid);
        println!("  {index:>3} {}", name.map_or("?", String::as_str));
    }
    if !state.check_consistency() {
        println!("accumulator state is inconsistent");
        failed = true;
    }
    Ok(if failed { 1 } else { 0 })
}
