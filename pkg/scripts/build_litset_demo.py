"""Build a small LitSet corpus from the bundled 20-entity knowledge-base fixture.

Writes made-up sentences and mentions next to the output, then runs
`litset build-litset` on them once per sampling mode.

    python3 scripts/build_litset_demo.py --out runs/litset-demo
"""
import argparse
import json
from pathlib import Path

from litset.builder import load_kb_records
from litset.cli import main as cli

KB = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "kb20.jsonl"


def write_inputs(out: Path) -> tuple[Path, Path]:
    kb = load_kb_records(KB)
    sentences, mentions = [], []
    for i, qid in enumerate(sorted(kb)):
        tokens = ["They", "visited", f"Entity{qid}", "last", "year", "."]
        sentences.append({"tokens": tokens})
        mentions.append({"sentence_index": i, "start": 2, "end": 3, "qid": qid})
    out.mkdir(parents=True, exist_ok=True)
    sent_path, mention_path = out / "sentences.jsonl", out / "mentions.jsonl"
    sent_path.write_text("".join(json.dumps(s) + "\n" for s in sentences), encoding="utf-8")
    mention_path.write_text("".join(json.dumps(m) + "\n" for m in mentions), encoding="utf-8")
    return sent_path, mention_path


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/litset-demo")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    sents, mentions = write_inputs(out / "inputs")
    for mode in ("sampled", "labels_only", "description_only"):
        code = cli(["build-litset", "--kb", str(KB), "--mentions", str(mentions), "--sentences",
                    str(sents), "--mode", mode, "--seed", str(args.seed), "-o", str(out / mode)])
        if code:
            raise SystemExit(code)
        first = (out / mode / "corpus" / "sentences.jsonl").read_text(encoding="utf-8").splitlines()[0]
        print(f"{mode:>16}: {json.loads(first)}")


if __name__ == "__main__":
    main()
