from torch.utils.data import DataLoader, Dataset

import numpy as np
import torch


class LowFreqDataset(Dataset):
    '''
    Rows of flattened low-frequency vectors (one per slice), served to the
    FRM trainer as float64 tensors.
    '''

    def __init__(self, vectors: np.ndarray, transform=None):
        self.transform = transform
        self.data = np.asarray(vectors, dtype=np.float64)
        assert self.data.ndim == 2, 'vectors should have shape [n_slices, d]'

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, idx):
        sample = self.data[idx]

        if self.transform:
            sample = self.transform(sample)

        return torch.tensor(sample, dtype=torch.float64)


def make_loader(vectors: np.ndarray, batch_size: int, seed: int) -> DataLoader:
    '''
    Seeded shuffling loader: every pass over it draws the next permutation
    from one generator, so the epoch order is the same for the same seed.
    '''
    generator = torch.Generator()
    generator.manual_seed(seed)

    return DataLoader(
        LowFreqDataset(vectors),
        batch_size=batch_size,
        shuffle=True,
        generator=generator,
        num_workers=0,
    )
