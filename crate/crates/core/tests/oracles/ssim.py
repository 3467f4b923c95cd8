# Reference SSIM for the 16x16 pattern used in the metrics unit tests,
# computed with scikit-image (Gaussian window sigma=1.5, 11 taps,
# population covariance, data range 1).
import numpy as np
from skimage.metrics import structural_similarity

i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
a = 0.5 + 0.4 * np.sin(0.7 * i) * np.cos(0.45 * j)
b = 0.5 * a
s = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                          use_sample_covariance=False, data_range=1.0)
print(repr(s))
