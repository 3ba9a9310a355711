"""Export torchvision's ImageNet ResNet50 weights for `backbone.checkpoint`.

    python python/export_resnet50.py resnet50.safetensors

Needs torch, torchvision and safetensors, plus network access (or a warm
torch hub cache) for the weight download.
"""

import argparse

import torch
import torchvision
from safetensors.torch import save_file


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="destination .safetensors path")
    ap.add_argument("--untrained", action="store_true", help="random init, no download (layout checks only)")
    args = ap.parse_args()

    weights = None if args.untrained else torchvision.models.ResNet50_Weights.IMAGENET1K_V1
    if args.untrained:
        torch.manual_seed(0)
    model = torchvision.models.resnet50(weights=weights).eval()
    # Only float tensors; the classifier head is kept but unused.
    state = {
        k: v.detach().to(torch.float32).contiguous()
        for k, v in model.state_dict().items()
        if v.is_floating_point()
    }
    save_file(state, args.out, metadata={"kind": "resnet50_backbone", "weights": str(weights)})
    print(f"wrote {len(state)} tensors to {args.out}")


if __name__ == "__main__":
    main()
