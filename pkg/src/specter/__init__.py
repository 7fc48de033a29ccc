"""Self-consistent classical noise spectroscopy for dephasing qubits."""
__version__ = "0.1.0"
