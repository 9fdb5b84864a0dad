"""Print the dual-stream mask and confirm the single pass matches K separate passes."""
import numpy as np

from stabledrl_lab.model import init_params
from stabledrl_lab.staircase import build_staircase_mask, iterative_reference, staircase_block_logprobs

print(build_staircase_mask(6, 2).to_text())

params = init_params(vocab_size=9, embed_dim=8, max_seq_len=12, block_size=3, seed=1)
rng = np.random.default_rng(1)
clean = rng.integers(0, 8, 12)
corrupted = np.where(rng.random(12) < 0.5, params.mask_id, clean)
diff = np.abs(staircase_block_logprobs(params, clean, corrupted) - iterative_reference(params, clean, corrupted))
print(f"\nmax |single pass - iterative| = {diff.max():.2e}")
