"""Published 10-phase transition counts and oracle entropies.

Counts and occupancies are transcribed from the source table. The entropies were
computed independently at 50 significant digits by direct summation over the
nonzero probabilities (row denominators are the row transition totals, weights
are occupancy shares) and rounded to 20 digits here.
"""
import numpy as np

OCCUPANCY = np.array([764, 622, 645, 621, 615, 546, 260, 251, 324, 352])
COUNTS = np.array(
    [
        [137, 563, 3, 0, 0, 0, 16, 44, 0, 0],
        [0, 5, 610, 5, 0, 0, 0, 1, 0, 0],
        [6, 0, 20, 612, 5, 0, 0, 0, 2, 0],
        [1, 0, 0, 3, 609, 7, 0, 0, 0, 0],
        [77, 0, 0, 0, 0, 537, 0, 0, 0, 0],
        [276, 22, 1, 0, 0, 2, 244, 0, 0, 0],
        [0, 0, 6, 0, 0, 0, 0, 206, 48, 0],
        [0, 0, 0, 1, 0, 0, 0, 0, 250, 0],
        [0, 0, 0, 0, 1, 0, 0, 0, 24, 299],
        [267, 32, 0, 0, 0, 0, 0, 0, 0, 53],
    ]
)
# bold cells of the source table
BOLD = [{1}, {2}, {3}, {4}, {5}, {0, 6}, {7}, {8}, {9}, {0}]

ROW_TOTALS = [763, 621, 645, 620, 614, 545, 260, 251, 324, 352]
H_ROWS = [
    0.79999011805333889472,
    0.10555919305034070906,
    0.25663195538913356781,
    0.10437345716055851415,
    0.3775617127823313985,
    0.86605384192108353301,
    0.58333279982475543288,
    0.025989873531936841179,
    0.28473758871774316064,
    0.71270955031195978675,
]
H_C = 0.42271567482162348658
# same sums with the occupancy as probability denominator (literal reading)
H_C_OCCUPANCY_DENOMINATOR = 0.42326416828287156279

SHORT_CYCLE = [0, 1, 2, 3, 4, 5]
LONG_CYCLE = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
