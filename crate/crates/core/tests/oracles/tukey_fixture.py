# Reference p-values for the 3-group Tukey fixture and a few studentized
# range CDF points, computed with scipy.
from scipy.stats import studentized_range, tukey_hsd

a = [1.12, 0.95, 1.30, 1.05, 0.88, 1.21, 1.02, 0.97, 1.15, 1.09]
b = [1.25, 1.38, 1.19, 1.44, 1.31, 1.27, 1.50, 1.22, 1.36, 1.29]
c = [1.01, 1.10, 0.93, 1.18, 1.07, 0.99, 1.14, 1.03, 0.96, 1.12]
res = tukey_hsd(a, b, c)
for i, j in [(0, 1), (0, 2), (1, 2)]:
    print(i, j, repr(float(res.pvalue[i, j])))

for q, k, df in [(0.5, 3, 27), (2.0, 3, 27), (3.5, 3, 27), (4.2, 6, 210), (3.0, 5, 4), (1.2, 2, 1), (6.0, 10, 12)]:
    print(q, k, df, repr(float(studentized_range.cdf(q, k, df))))
