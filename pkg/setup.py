from setuptools import find_packages, setup

try:
    # read the contents of your README file
    from pathlib import Path
    this_directory = Path(__file__).parent
    long_description = (this_directory / "README.md").read_text()
except:
    long_description = ""

setup(
    name="gfrrn",
    description="Gap-free dual-stream reflection removal: unified labels, Gaussian frequency blocks, dynamic agent attention and Mona tuning",
    long_description=long_description,
    long_description_content_type='text/markdown',
    version="0.1.0",
    packages=find_packages(exclude=["features", "features.*", "examples", "examples.*"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy",
        "scipy",
        "torch",
        "torchvision",
        "einops",
        "timm",
        "pandas",
        "tqdm",
        "pillow",
        "imageio",
        "scikit-image",
        "matplotlib",
        "pyyaml",
        "loguru",
    ],
    extras_require={"test": ["behave"]},
    entry_points={"console_scripts": ["gfrrn=gfrrn.cli:main"]},
)
