"""Compare the recursive MHE gradient against the dense KKT solve and finite differences."""
from neuromhe.checks import (check_finite_differences, check_horizon_one, check_kf_vs_dense,
                             check_smoothed_relation)

err, fails = check_kf_vs_dense(instances=40)
print(f"KF vs dense over 40 windows: max rel err {err:.2e} ({fails} singular)")
print(f"finite differences, toy N=3: max rel err {check_finite_differences():.2e}")
print(f"N=1 closed-form start:       {check_horizon_one():.2e}")
print(f"N=2 smoothing relation:      {check_smoothed_relation():.2e}")
