"""Scoring one patient with the serum fibrosis indices.

Run with ``python3 demos/01_scoring_a_patient.py``.
"""

from cirrhosis_horizon.fibrosis import (
    FIB4_CUTOFF,
    FIB4_DIRECTION,
    FIB5_CUTOFF,
    FIB5_DIRECTION,
    SerumPanel,
    classify_cutoff,
    fib4,
    fib5,
)

# A 61-year-old with AST 80 U/L, ALT 49 U/L and platelets 150 x10^9/L.
panel = SerumPanel(age_years=61, ast_u_per_l=80, alt_u_per_l=49, platelets_1e9_per_l=150,
                   albumin_g_per_dl=3.6, alp_u_per_l=140)

score4 = fib4(panel)
print(f"FIB-4 = {score4:.3f} -> {classify_cutoff(score4, FIB4_CUTOFF, FIB4_DIRECTION)}")

# FIB-5 runs the other way: lower values point to more fibrosis.
score5 = fib5(panel)
print(f"FIB-5 = {score5:.3f} -> {classify_cutoff(score5, FIB5_CUTOFF, FIB5_DIRECTION)}")

# Halving the platelet count doubles the platelet term of FIB-4.
thin = SerumPanel(61, 80, 49, 75)
print(f"FIB-4 with platelets 75: {fib4(thin):.3f}")
