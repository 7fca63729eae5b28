"""Encode image datasets with contrastive vision-language backbones into
bit-exact embedding stores consumable by the fusion core."""

from .datasets import DatasetError, FolderDataset, load_folder_dataset, resolve_dataset
from .encoders import EncoderError, MockEncoder, make_encoder
from .extract import ExtractJob, extract

__version__ = "0.1.0"
