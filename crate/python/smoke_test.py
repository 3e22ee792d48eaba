#!/usr/bin/env python3
"""Smoke test for the fedtext_py extension module.

Build the module first:

    cargo build -p fedtext-py --release

then run this script from anywhere:

    python3 python/smoke_test.py
"""

import json
import pathlib
import shutil
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def import_module():
    """Copies the built cdylib next to a temp dir as fedtext_py.so and imports it."""
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libfedtext_py.so", "libfedtext_py.dylib", "fedtext_py.dll")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("fedtext_py cdylib not found; run `cargo build -p fedtext-py --release` first")
    stage = pathlib.Path(tempfile.mkdtemp(prefix="fedtext_py_"))
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    shutil.copy2(built, stage / f"fedtext_py{suffix}")
    sys.path.insert(0, str(stage))
    import fedtext_py  # noqa: E402

    return fedtext_py


def check(name, condition, detail=""):
    status = "ok" if condition else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    if not condition:
        sys.exit(1)


def main():
    ft = import_module()
    print(f"fedtext_py {ft.__version__}")

    # tokenizer and vocabulary
    tokens = ft.tokenize("I feel SAD.")
    check("tokenize", tokens == ["i", "feel", "sad"], repr(tokens))
    vocab = ft.Vocabulary.build(["a b", "a"], 100)
    check("vocab ranking", vocab.id_of("a") == 2 and vocab.id_of("b") == 3)
    encoded = vocab.encode("a b unknown", 6)
    check("encode_and_pad", encoded == [2, 3, 1, 0, 0, 0], repr(encoded))

    # parameter-count arithmetic for the full-size architectures
    counts = {cell: ft.parameter_count(cell) for cell in ("rnn", "gru", "lstm")}
    check(
        "parameter counts",
        counts == {"rnn": 321_603, "gru": 722_403, "lstm": 922_803},
        repr(counts),
    )

    # a tiny federated experiment on the synthetic corpus
    work = pathlib.Path(tempfile.mkdtemp(prefix="fedtext_smoke_"))
    train, test, emb = ft.generate_synthetic_corpus(
        str(work / "corpus"), per_class=60, vocab_size=100, seed=4
    )
    config_path = work / "experiment.toml"
    config_path.write_text(
        f"""
mode = "federated"
seed = 5
output_dir = "{work / 'out'}"

[data]
train = "{train}"
test = "{test}"
embeddings = "{emb}"
tokenizer_corpus = "{train}"
vocab_max_size = 500

[model]
cell = "gru"
recurrent_units = 24
dense_units = 24
max_seq_len = 16
dropout_rate = 0.1

[federation]
rounds = 5
clients = 3
learning_rate = 0.01
batch_size = 16
"""
    )
    records = ft.run_experiment(str(config_path))
    check("round count", len(records) == 5)
    check(
        "record fields",
        {"round", "global", "locals", "global_objective", "bytes", "timing"}
        <= set(records[-1]),
        sorted(records[-1]),
    )
    final_acc = records[-1]["global"]["accuracy"]
    first_acc = records[0]["global"]["accuracy"]
    check("accuracy improves", final_acc >= first_acc and final_acc > 0.6,
          f"{first_acc:.3f} -> {final_acc:.3f}")
    check(
        "artifacts written",
        all(
            (work / "out" / n).exists()
            for n in ("rounds.jsonl", "metrics.csv", "ledger.csv", "profile.csv", "final_model.bin")
        ),
    )
    jsonl = (work / "out" / "rounds.jsonl").read_text().splitlines()
    check("rounds.jsonl agrees", len(jsonl) == 5 and json.loads(jsonl[-1])["round"] == 5)

    # classify a marker-heavy text with the trained model
    clf = ft.Classifier(str(work / "out" / "final_model.bin"), str(config_path))
    label, name = clf.predict("m000 m003 m005 f001")
    check("classifier predicts marker class", label == 0, f"{label} ({name})")
    label2, _ = clf.predict("m200 m203 m205 f001")
    check("classifier separates classes", label2 == 2, str(label2))

    print("smoke test passed")


if __name__ == "__main__":
    main()
