"""Peak-memory accounting: full fine-tuning vs a sliding Q-layer window."""
from fedchain.federation import (
    DEFAULT_ASSUMPTIONS,
    MEMORY_PRESETS,
    determine_Q,
    estimate_peak_memory,
)

dims = MEMORY_PRESETS["llama2-7b-shaped"]
batch, seq_len = DEFAULT_ASSUMPTIONS["batch"], DEFAULT_ASSUMPTIONS["seq_len"]
GIB = float(1 << 30)

# End-to-end adapter training keeps every layer and activation resident.
full = estimate_peak_memory(dims, batch, seq_len, mode="full")
print(f"full training peak: {full.peak_bytes / GIB:.1f} GiB")
for name, share in full.shares.items():
    print(f"  {name:<17} {share:6.1%}")

# Chain mode keeps only the window plus one streaming block; earlier layers
# are transient, so peak memory scales with Q instead of L.
print("\n   Q   peak (GiB)   saved vs full")
for q in (6, 7, 8):
    report = estimate_peak_memory(dims, batch, seq_len, Q=q)
    saved = 1.0 - report.peak_bytes / full.peak_bytes
    print(f"  {q:>2}   {report.peak_bytes / GIB:9.1f}   {saved:12.1%}")

# Device onboarding works the other way around: given a byte budget, take the
# largest window that still fits.
for budget_gib in (8, 12, 16):
    q = determine_Q(budget_gib * GIB, dims, batch, seq_len)
    print(f"\na {budget_gib} GiB device can train Q = {q} layers at a time")
