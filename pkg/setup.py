from setuptools import setup, find_packages

setup(
    name="ecgnat",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    py_modules=["app", "simulation"],
    python_requires=">=3.9",
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'scikit-learn',
        'threadpoolctl',
        'tqdm',
        'pyyaml',
    ],
    extras_require={
        'test': ['pytest', 'hypothesis'],
    },
    entry_points={
        'console_scripts': ['ecgnat=app:main'],
    },
)
