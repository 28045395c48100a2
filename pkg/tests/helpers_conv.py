import numpy as np


def reference_conv(x, w, stride=(1, 1), dilation=(1, 1), left_pad_w=0):
    """Quadruple loop over (out channel, row, column, in channel) with inner taps."""
    B, ci, H, W = x.shape
    co, _, kh, kw = w.shape
    sh, sw = stride
    dh, dw = dilation
    xp = np.zeros((B, ci, H, W + left_pad_w))
    xp[..., left_pad_w:] = x
    Ho = (H - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + left_pad_w - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((B, co, Ho, Wo))
    for b in range(B):
        for o in range(co):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(ci):
                        for p in range(kh):
                            for q in range(kw):
                                s += w[o, c, p, q] * xp[b, c, i * sh + p * dh, j * sw + q * dw]
                    out[b, o, i, j] = s
    return out
