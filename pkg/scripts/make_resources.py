"""Regenerate the bundled KG fixture corpus under src/knowmvg/resources."""
from pathlib import Path

from knowmvg.data import corpus_from_samples, generate_dataset, write_corpus, write_fixtures

ROOT = Path(__file__).resolve().parents[1] / "src" / "knowmvg" / "resources"

if __name__ == "__main__":
    write_fixtures(ROOT)
    write_corpus(corpus_from_samples(generate_dataset(seed=0, n=48)), ROOT / "corpus.jsonl")
    print(f"wrote fixtures to {ROOT}")
