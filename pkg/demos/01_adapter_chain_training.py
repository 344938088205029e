"""Walk one window of chain training by hand: schedule, dual loss, SGD."""
import numpy as np

from fedchain.chain import StageLossConfig, WindowSchedule, local_update, stage_loss
from fedchain.model import StackDims, build_stack

# A 6-layer frozen backbone with rank-3 adapters and a 4-class head.
dims = StackDims(L=6, u=16, v=3, C=4, kind="mlp", vocab=30)
stack = build_stack(dims, seed=0)

# The window slides one layer per round and wraps around; every position
# shares Q-1 layers with its neighbour, so each interior adapter is revisited.
schedule = WindowSchedule(L_start=2, L=dims.L, Q=3)
print("window cycle:", schedule.positions)
for r in (1, 4, 5, 6, 9):
    print(f"  round {r:>2} trains layers {schedule.window_at_round(r)}")

# Synthetic batch: token ids in, class labels out.
rng = np.random.default_rng(1)
x = rng.integers(0, dims.vocab, size=(32, 8))
y = rng.integers(0, dims.C, size=32)

# The stage objective is the window's local-head loss plus lambda times a
# global loss routed through the frozen later adapters and the final head.
window = schedule.window_at_round(1)
loss, info = stage_loss(stack, x, y, window, StageLossConfig(lam=0.2))
print(f"\nstage loss at init: total={info['total']:.4f} "
      f"(local={info['local']:.4f}, global={info['global']:.4f})")

# Twenty full-batch SGD steps on the window adapters plus shared heads.
delta, log = local_update(stack, x, y, window, StageLossConfig(lam=0.2),
                          steps=20, lr=0.3, batch_size=32, seed=7)
print("\nloss per step:")
print("  " + " ".join(f"{v:.3f}" for v in log["losses"]))
print("\ntensors touched by this stage:")
for name, arr in sorted(delta.items()):
    print(f"  {name:<24} shape {arr.shape}, mean |delta| {np.abs(arr).mean():.2e}")
