"""dcdl: k-term DNF rule extraction from binary-activation CNNs.

Submodules:
    boolcore   bit-packed formulas, instances, datasets
    sls        stochastic local search for k-term DNF
    binarize   dithering, categorical expansion, one-vs-all balancing
    datasets   IDX / CIFAR-10 loaders, splits, synthetic generators
    bnn        binary-activation CNN with straight-through training
    convrules  sliding-window rules and their visualization
    extraction layerwise (decompositional) and black-box rule extraction
    metrics    similarity, accuracy, corrected resampled t-test
    experiment end-to-end experiment driver
    cli        command line interface
"""

__version__ = "0.1.0"
