"""
Session graphs
==============

Every prefix becomes a small directed graph over its distinct items. The
incoming and outgoing adjacency rows are normalised by degree.
"""

from tagnnpp.data import LabeledExample, make_batches
from tagnnpp.graph import build_graph

g = build_graph([1, 2, 3, 2, 4])
print("nodes ", g.nodes.tolist())
print("alias ", g.alias.tolist())   # position -> node slot
print("a_out\n", g.a_out)
print("a_in\n", g.a_in)

# repeated transitions are counted once unless weighted edges are requested
print(build_graph([1, 2, 1, 2, 1, 3]).a_out)
print(build_graph([1, 2, 1, 2, 1, 3], weighted_edges=True).a_out)

# batches carry padded adjacency blocks alongside the padded item matrix
examples = [LabeledExample((3, 4, 3, 9), 2), LabeledExample((5,), 6)]
(batch,) = make_batches(examples, batch_size=2)
print(batch.items)
print(batch.a_out.shape, batch.mask)
