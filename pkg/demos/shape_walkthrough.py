"""Trace one 96^3 patch through the reference-width network and print every stage shape."""
import argparse
import tempfile

import torch

from cdpdnet.model import ModelConfig, build_model
from cdpdnet.partial_labels import reference_registry


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--task-id", type=int, default=1)
    args = p.parse_args()

    reg = reference_registry()
    torch.manual_seed(0)
    with tempfile.TemporaryDirectory() as cache:
        model = build_model(ModelConfig(reg.num_labels, reg.num_tasks), reg, cache=cache).eval()
    x = torch.rand(1, 1, 96, 96, 96)
    with torch.no_grad():
        logits, st = model(x, args.task_id, return_state=True)

    print(f"input            {tuple(x.shape)}")
    for k, (lvl, skip) in enumerate(zip(st["levels"], st["skips"]), 1):
        print(f"cnn level {k}      {tuple(lvl.shape)}   fused skip {tuple(skip.shape)}")
    print(f"task prompt      {tuple(st['prompt'].shape)}")
    print(f"decoder input    {tuple(st['decoder_input'].shape)}")
    print(f"logits           {tuple(logits.shape)}")
    task = reg.task(args.task_id)
    print(f"task {task.id} ({task.name}) annotates {', '.join(task.label_set)}")


if __name__ == "__main__":
    main()
