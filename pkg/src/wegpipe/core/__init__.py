"""Stage library: tensors, the classifier, explainers, refinement, labels and metrics."""
