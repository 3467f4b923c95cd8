# Independent evaluation of the PU21 "banding" encoding.
import math

P = [1.070275272, 0.4088273932, 0.153224308, 0.2520326168,
     1.063512885, 1.14115047, 521.4527484]


def pu21(y):
    y = min(max(y, 0.005), 10000.0)
    yp = y ** P[3]
    return max(P[6] * (((P[0] + P[1] * yp) / (1 + P[2] * yp)) ** P[4] - P[5]), 0.0)


for y in (0.005, 100.0, 10000.0):
    print(f"{y!r}: {pu21(y)!r}")
