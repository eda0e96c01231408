"""Print per-layer counts of the CNN, the trainable fraction per freeze plan and the communication reduction."""

from fedpt.metrics import comm_cost, reduction_factor
from fedpt.model import FreezePlan, apply_freeze_plan, build_model, emnist_cnn_spec, trainable_fraction

REPORTED_FRACTIONS = [0.0216, 0.0347, 0.0807, 0.2625, 1.0, 0.738, 0.826, 0.913]


def main():
    model = build_model(emnist_cnn_spec())
    counts = model.layer_param_counts()
    for layer, shape in zip(model.spec.layers, model.output_shapes):
        if counts.get(layer.name):
            print(f"{layer.name:<14}{str(shape):<16}{counts[layer.name]:>12,}")
    print(f"{'total':<30}{model.param_count:>12,}\n")

    for frozen in ([], ["dense_0"], ["conv2d_0", "conv2d_1"], ["dense_0", "conv2d_1"]):
        plan = FreezePlan(frozenset(frozen))
        params = apply_freeze_plan(model, plan, seed=0)
        frac = trainable_fraction(plan, model)
        down, up = comm_cost(params.num_trainable, 20)
        print(f"freeze {frozen!s:<28} {100 * frac:6.2f}% trainable  {reduction_factor(frac):5.1f}x  "
              f"bytes/round (m=20): down {down:,} up {up:,}")
    print()
    for f in REPORTED_FRACTIONS:
        print(f"fraction {100 * f:6.2f}% -> {reduction_factor(f):.1f}x")


if __name__ == "__main__":
    main()
