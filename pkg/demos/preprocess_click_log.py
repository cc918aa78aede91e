"""
From a raw click log to training examples
=========================================

Uses the 20-session fixture shipped with the tests: sessionize, drop rare
items and short sessions until nothing changes, split by time, expand
prefixes.
"""

import json
import tempfile
from pathlib import Path

from tagnnpp.data import Corpus, preprocess

fixture = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "yoochoose-20.dat"
corpus = preprocess(fixture, "yoochoose")
print(json.dumps(corpus.stats(), indent=2))

for ex in corpus.train_examples()[:5]:
    print([corpus.vocab.decode(i) for i in ex.prefix], "->", corpus.vocab.decode(ex.label))

with tempfile.TemporaryDirectory() as tmp:
    bin_path, stats_path = corpus.save(tmp, "fixture")
    again = Corpus.load(bin_path)
    print("round trip ok:", again.train == corpus.train and again.test == corpus.test)
