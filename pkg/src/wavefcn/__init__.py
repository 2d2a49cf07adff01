"""Raw-waveform speech enhancement with dense, convolutional and fully convolutional networks."""

__version__ = "0.1.0"
