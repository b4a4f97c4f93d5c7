"""Closed-form JCT of one uncontended DNN A iteration on a single switch.

No loss, no jitter, every worker starts at t=0. Packets leave a worker at
line rate until the window is full; afterwards each result releases the
next packet one round trip after its predecessor in the window. One round
trip is worker serialization + link latency + switch egress serialization
+ link latency. Layer-2 computation starts at max(layer-1 results +
layer-1 computation, layer-2 results).
"""

from math import ceil

BW = 100e9
PKT = 306
LAT = 5e-6
PART_BYTES = 4_000_000
COMP = 320e-6


def jct(window_bytes):
    ser = PKT * 8 / BW
    rtt = ser + LAT + ser + LAT
    w = window_bytes // PKT
    per_part = ceil(PART_BYTES / PKT)
    n = 4 * per_part

    def depart(k):
        if w * ser >= rtt:
            return k * ser
        return (k // w) * rtt + (k % w) * ser

    def result(k):
        return depart(k) + rtt

    l1_done = result(3 * per_part - 1)
    l2_done = result(n - 1)
    return max(l1_done + COMP, l2_done) + COMP, w


if __name__ == "__main__":
    line = 4 * ceil(PART_BYTES / PKT) * PKT * 8 / BW + 2 * (PKT * 8 / BW + LAT) + COMP
    print(f"line-rate bound (bytes*8/bw + rtt + comp): {line * 1e9:.1f} ns")
    for wb in (60_000, 200_000):
        t, w = jct(wb)
        print(f"window {wb} B ({w} pkts): {t * 1e9:.1f} ns")
