"""The mask distributions: uniform-cardinality law with its exact
probabilities, independent and block samplers, and the antithetical
triple used during alignment."""

import numpy as np

from lalign.masking import (
    Mask,
    make_triple,
    mask_probability,
    sample_bernoulli_mask,
    sample_block_mask,
    sample_uniform_mask,
)

rng = np.random.default_rng(7)

print("= Uniform-cardinality law on n=2: exact vs sampled =")
counts = {}
draws = 50_000
for _ in range(draws):
    key = tuple(sample_uniform_mask(2, rng).bits)
    counts[key] = counts.get(key, 0) + 1
for bits in [(0, 0), (0, 1), (1, 0), (1, 1)]:
    p = mask_probability(Mask(np.array(bits, dtype=np.uint8)))
    print(f"  mask {bits}: exact {p:.4f}  sampled {counts.get(bits, 0) / draws:.4f}")

print("\n= The law normalizes exactly (enumeration on n=10) =")
total = 0.0
for idx in range(2**10):
    bits = np.array([(idx >> i) & 1 for i in range(10)], dtype=np.uint8)
    total += mask_probability(Mask(bits))
print(f"  sum over all 2^10 masks: {total:.15f}")

print("\n= Independent visibility and block masks on an 8x8 grid =")
bern = sample_bernoulli_mask(64, 0.75, rng)
block = sample_block_mask(8, 8, 0.5, rng)
print(f"  bernoulli(0.75): {bern.cardinality}/64 visible")
print(f"  block(target 0.5): {block.cardinality}/64 visible")
print("  block mask as a grid (1 = visible):")
for row in block.bits.reshape(8, 8):
    print("   ", "".join(str(b) for b in row))

print("\n= The antithetical triple =")
m = sample_uniform_mask(8, rng)
triple = make_triple(m)
print(f"  m          {tuple(triple.m.bits)}")
print(f"  complement {tuple(triple.complement.bits)}")
print(f"  full       {tuple(triple.full.bits)}")
