"""Bundle and checkpoint formats, image metrics and memory accounting."""
from .bundle import Bundle, BundleError, load_bundle, save_bundle
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .metrics import memory_bytes, psnr, report_memory, ssim

__all__ = ["Bundle", "BundleError", "load_bundle", "save_bundle", "Checkpoint", "CheckpointError",
           "load_checkpoint", "save_checkpoint", "memory_bytes", "psnr", "report_memory", "ssim"]
