"""Forward/inverse DFT, Parseval and the amplitude/phase split on one phantom frame."""
import numpy as np

from ksyn.kspace import decompose, dft2, fftshift, idft2, recompose
from ksyn.phantom import PhantomSpec, generate_phantom

frame = generate_phantom(PhantomSpec(grid=(64, 64, 4), seed=1)).data[:, :, 0]
spec = dft2(frame)

rt = np.linalg.norm(idft2(spec) - frame) / np.linalg.norm(frame)
e_img = np.sum(np.abs(frame) ** 2)
e_k = np.sum(np.abs(spec.data) ** 2) / frame.size
print(f"round trip relative error   {rt:.2e}")
print(f"Parseval relative mismatch  {abs(e_img - e_k) / e_img:.2e}")

ap = decompose(spec)
back = recompose(ap)
print(f"polar round trip max error  {np.max(np.abs(back.data - spec.data)):.2e}")
print(f"phase range                 [{ap.phase.min():.3f}, {ap.phase.max():.3f}]")

centred = fftshift(spec)
dc = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(centred.data)), centred.shape))
print(f"DC moves to {dc} after fftshift")
