"""
Training on a synthetic corpus
==============================

Sessions are walks along five disjoint item cycles, so the next item is
fully determined by the current one. A small model should learn this in a
handful of epochs.
"""

import numpy as np

from tagnnpp import ModelConfig, TAGNNPlusPlus, TrainConfig, evaluate, fit, make_batches
from tagnnpp.synthetic import markov_corpus, markov_patterns

print("patterns:", markov_patterns(30, 5, seed=0))
corpus = markov_corpus(n_sessions=200, n_items=30, n_patterns=5, n_test_sessions=50, seed=0)
train, test = corpus.train_examples(), corpus.test_examples()
print(len(train), "training examples,", len(test), "test examples")

model = TAGNNPlusPlus.initialize(ModelConfig(n_items=corpus.n_items, d=32, heads=2), seed=0)
cfg = TrainConfig(epochs=8, lr=1e-3, decay_factor=1.0)
fit(model, train, cfg, eval_n=1,
              callback=lambda r: print(f"epoch {r['epoch']}  loss {r['train_loss']:.3f}  val HR@1 {r['val_hr20']:.1f}"))

report = evaluate(model, test, n=1)
print(f"test HR@1 {report.hr:.2f}  MRR@1 {report.mrr:.2f}")

# the learned transition for one item
(batch,) = make_batches(test[:1], 1)
logits = model(batch).data[0]
print("prefix", test[0].prefix, "label", test[0].label, "top-3", (np.argsort(-logits)[:3] + 1).tolist())
