"""Bucket spread of the aggregator hash over sequential sequence numbers.

Independent re-implementation of the index function (SplitMix64 finalizer
over job*C1 ^ seq*C2, reduced mod pool size). Prints the max bucket load
relative to the mean for a few jobs.
"""

M = (1 << 64) - 1
C1 = 0x9E3779B97F4A7C15
C2 = 0xC2B2AE3D27D4EB4F


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
    return z ^ (z >> 31)


def index(job, seq, pool):
    return mix64(((job * C1) & M) ^ ((seq * C2) & M)) % pool


def spread(job, n=1_000_000, pool=4096):
    counts = [0] * pool
    for s in range(n):
        counts[index(job, s, pool)] += 1
    return max(counts), min(counts), n / pool


if __name__ == "__main__":
    for job in (0, 1, 7):
        hi, lo, mean = spread(job)
        print(f"job {job}: max {hi} min {lo} mean {mean:.2f} max/mean {hi / mean:.4f}")
    print("samples", [index(0, 0, 4096), index(1, 0, 4096), index(3, 12345, 16339), index(7, 999_999, 4096)])
