from .dataset import (
    COVID,
    HEALTHY,
    LABELS,
    DatasetSplit,
    PairingError,
    SliceRecord,
    SplitError,
    class_index,
    label_from_mask,
    read_manifest,
    slice_volume,
    split_dataset,
    write_manifest,
)
from .images import AffineDraw, AugmentationSpec, augment, resize_bilinear, resize_nearest, sample_augmentation
from .nifti import NiftiFormatError, UnsupportedDatatypeError, VolumeRecord, read_nifti, read_nifti_volume, write_nifti
