"""Expected values fixed before implementation, derived by hand or from closed forms."""

# cost examples
SMOOTHNESS_STEP = ([0.0, 0.0, 1.0], 1.0)          # second difference 1 -> 1^2
SMOOTHNESS_LINE = ([0.0, 1.0, 2.0, 3.0], 0.0)     # constant velocity
HINGE_HALF = (0.5, 0.25)                          # 0.5 outside the box -> 0.5^2

# schedule
T = 100
ALPHA_BAR_LAST_MAX = 0.05
ALPHA_BAR_FIRST_RANGE = (0.99, 1.0)
STEPS_T100_N1 = [99]
STEPS_T100_N16_LEN = 16

# policy normalization on bounds [-3, 3]
NORMALIZE_CASES = [(-3.0, -1.0), (0.0, 0.0), (3.0, 1.0), (1.5, 0.5)]

# classifier-free dropout at p=0.1 over 10k draws
DROPOUT_P = 0.1
DROPOUT_RANGE = (0.08, 0.12)

# gaussian product N(0,1) x N(1,1)
POE = dict(mean=0.5, var=0.5, mean_range=(0.45, 0.55), var_range=(0.40, 0.60), tv_max=0.1)

# tolerances
FD_RTOL = 1e-4
IDENTITY_ATOL = 1e-6
DISCRETE_ATOL = 1e-9
RECON_RMSE = 0.1
