import torch

# tiny tensors + oversubscribed BLAS threads make this sandbox ~5x slower;
# single-threaded torch is fastest and keeps runs deterministic
torch.set_num_threads(1)
