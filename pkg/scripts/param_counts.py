"""Print parameter counts for every preset model config."""
import argparse

from tilemark.blocks import count_parameters
from tilemark.models import build_model
from tilemark.training import presets


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--skip-full-transunet", action="store_true",
                        help="skip building the ~110M-parameter TransUNet")
    args = parser.parse_args()
    print(f"{'preset':22s} {'model':14s} {'parameters':>14s}")
    for name, (model_cfg, _) in presets().items():
        if args.skip_full_transunet and name == "transunet":
            continue
        n = count_parameters(build_model(model_cfg))
        print(f"{name:22s} {model_cfg.kind:14s} {n:14,d}")


if __name__ == "__main__":
    main()
