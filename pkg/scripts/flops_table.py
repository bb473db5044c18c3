"""Training FLOPs of full vs sparse attention for a few model sizes."""

from vsa.analysis import FlopsConfig, compute_flops, density

# (name, params, layers, heads, head_dim)
MODELS = [("60M", 6e7, 12, 8, 64), ("400M", 4e8, 24, 16, 64), ("1.4B", 1.4e9, 24, 32, 64)]


def main():
    seq, tokens, block, k = 16384, 16384 * 1000, 64, 32
    rho = density(k, block, seq)
    print(f"seq_len={seq} topk={k} density={rho}")
    print(f"{'model':>6} {'full':>10} {'vsa':>10} {'attn share':>10} {'saving':>7}")
    for name, n, layers, heads, hd in MODELS:
        base = dict(n_params=n, n_tokens=tokens, seq_len=seq, n_heads=heads, head_dim=hd, n_layers=layers, block=block)
        full = compute_flops(FlopsConfig(**base), "full")
        vsa = compute_flops(FlopsConfig(**base, density=rho), "vsa")
        share = full.attention_flops / full.total
        print(f"{name:>6} {full.total:10.3e} {vsa.total:10.3e} {share:10.1%} {full.total / vsa.total:6.2f}x")


if __name__ == "__main__":
    main()
