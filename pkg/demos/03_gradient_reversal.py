"""Gradient reversal as a two-player game, in miniature.

A feature extractor maps two Gaussian blobs (domains A and B) to features; a
classifier tries to tell them apart. The reversal boundary between them makes
one optimizer step help the classifier while pushing the extractor toward
features the classifier cannot use. Watching the classifier accuracy collapse
to chance is the whole trick behind the depth model's domain-invariant
encoder, two convolutional arguments smaller.

Run:  python demos/03_gradient_reversal.py
"""

import torch
import torch.nn as nn

from simdepth.networks import reverse_gradient

torch.manual_seed(0)

# two 2-D domains offset from each other
def sample(n, offset):
    return torch.randn(n, 2) + torch.tensor(offset)


extractor = nn.Sequential(nn.Linear(2, 16), nn.ReLU(), nn.Linear(16, 2))
classifier = nn.Sequential(nn.Linear(2, 16), nn.ReLU(), nn.Linear(16, 1))
opt = torch.optim.Adam(list(extractor.parameters()) + list(classifier.parameters()), lr=1e-2)
bce = nn.BCEWithLogitsLoss()

print("step  classifier accuracy (0.5 = domains indistinguishable)")
for step in range(601):
    a = sample(64, [+2.0, 0.0])
    b = sample(64, [-2.0, 0.0])
    feats = extractor(torch.cat([a, b]))
    labels = torch.cat([torch.ones(64), torch.zeros(64)])
    logits = classifier(reverse_gradient(feats, 1.0)).squeeze(1)
    loss = bce(logits, labels)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 100 == 0:
        with torch.no_grad():
            acc = ((torch.sigmoid(logits) > 0.5).float() == labels).float().mean().item()
        print(f"{step:4d}  {acc:.3f}")

print()
print("sanity check of the boundary itself:")
x = torch.tensor([1.0, 2.0], requires_grad=True)
y = (reverse_gradient(x, 0.5) * torch.tensor([3.0, 4.0])).sum()
y.backward()
print(f"forward value unchanged: {y.item():.1f} (= 1*3 + 2*4)")
print(f"gradient is -0.5 * [3, 4] = {x.grad.tolist()}")
