//! Random scripted-backend schedules over the built-in seed program.

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;

use spark_core::editor::Script;
use spark_core::simulate::SAMPLE_SEED;

const ACT_CLOSE: &str = "        # </SPARK:ACTION>\n";
const OP_CLOSE: &str = "        # </SPARK:OPERATOR>\n";

/// Editor replies covering local edits, entangled edits, broken tags,
/// hook-rejected content and replies with no program.
pub fn edit_pool() -> Vec<String> {
    let fence = |s: &str| format!("Here you go.\n```python\n{s}```\n");
    vec![
        fence(&SAMPLE_SEED.replace(ACT_CLOSE, &format!("        h = gain(h)\n{ACT_CLOSE}"))),
        fence(&SAMPLE_SEED.replace(ACT_CLOSE, &format!("        h = h + gain(h)\n        h = gain(h)\n{ACT_CLOSE}"))),
        fence(&SAMPLE_SEED.replace(OP_CLOSE, &format!("        self.gain = nn.Identity()\n{OP_CLOSE}"))),
        fence(&format!("{SAMPLE_SEED}# scaffold tweak\n")),
        fence(
            &SAMPLE_SEED
                .replace(OP_CLOSE, &format!("        self.gain = nn.Identity()\n{OP_CLOSE}"))
                .replace(ACT_CLOSE, &format!("        h = gain(h)\n{ACT_CLOSE}")),
        ),
        fence(&SAMPLE_SEED.replace(ACT_CLOSE, "")),
        fence(&SAMPLE_SEED.replace(ACT_CLOSE, &format!("        __INVALID_EDIT__\n{ACT_CLOSE}"))),
        fence(&SAMPLE_SEED.replace(ACT_CLOSE, &format!("        # nothing useful\n{ACT_CLOSE}"))),
        "I could not produce a program.".into(),
        String::new(),
    ]
}

/// Enough replies for `steps` attempts with up to `retries` route calls each.
pub fn random_script(rng: &mut ChaCha8Rng, steps: usize, retries: usize) -> Script {
    let tokens = ["OPERATOR", "ACTION", " action.", "both", "", "Operator"];
    let pool = edit_pool();
    Script {
        route: (0..steps * retries).map(|_| tokens.choose(rng).unwrap().to_string()).collect(),
        directive: (0..steps).map(|i| format!("try variant {i}")).collect(),
        edit: (0..steps).map(|_| pool.choose(rng).unwrap().clone()).collect(),
    }
}
