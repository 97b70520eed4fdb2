"""Print the per-stage output shapes and parameter count of a configured network.

    python scripts/shape_trace.py [--config configs/canonical.yaml]
"""
import argparse

from uasmooth.config import ExperimentConfig, load_config
from uasmooth.model import SEResNet


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    model = SEResNet(cfg.architecture, device="meta")  # shapes only, no weights allocated
    for name, shape in model.shape_trace():
        print(f"{name:<12} {shape}")
    print(f"parameters   {sum(p.numel() for p in model.parameters()):,}")


if __name__ == "__main__":
    main()
