"""Print query allocations for a few clips and the calibrated cost table.

    python3 demos/cost_table.py
"""

from avcompress.avqformer import AllocationPolicy, allocate
from avcompress.costing import format_table, reduction_report, reference_rows

for f_q, use_rate, frames, rate in [(3, False, 100, None), (3, True, 100, 1.2), (3, True, 100, 0.6), (1, False, 10, None)]:
    a = allocate(AllocationPolicy(f_q, use_rate), frames, 25, r_s=rate)
    label = f"r_s={rate}" if use_rate else "no rate"
    print(f"f_Q={f_q} {label:>9}  {frames} frames ({a.duration_s:.1f} s) -> {a.n_alloc} queries")

duration, rows = reference_rows()
print(f"\nclip duration calibrated to {duration:.3f} s so the baseline costs 2.24 TFLOPs\n")
print(format_table(rows)[1])
red = reduction_report(rows[0], rows[-1])
print(f"full configuration: {red['tokens_per_second']:.1f}% fewer tokens, {red['total_flops']:.1f}% fewer FLOPs")
