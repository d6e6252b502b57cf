"""Patellofemoral OA detection pipeline on synthetic phantom cohorts.

The package is organized as a small numpy library:

- ``datamodel``  records, the radiographic PFOA label rule, manifest CSV I/O
- ``imaging``    intensity normalization, bicubic resampling, orientation
- ``roi``        confidence-gated patellar box selection and a stand-in detector
- ``neuralnet``  a small CNN with exact forward/backward passes and SGD training
- ``gbm``        gradient-boosted trees with missing-value routing and TreeSHAP
- ``evalstats``  subject-wise stratified CV, ROC/PR, bootstrap CIs, DeLong test
- ``synth``      deterministic synthetic cohort + phantom radiograph generator
- ``cli``        batch commands tying the pipeline together
"""

from pfoakit import (
    cli,
    datamodel,
    evalstats,
    gbm,
    imaging,
    neuralnet,
    roi,
    synth,
)

__version__ = "0.1.0"

__all__ = [
    "cli",
    "datamodel",
    "evalstats",
    "gbm",
    "imaging",
    "neuralnet",
    "roi",
    "synth",
    "__version__",
]
