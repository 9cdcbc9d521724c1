from setuptools import setup, find_packages

setup(
    name="wegpipe",
    version="0.1.0",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    install_requires=[
        'numpy>=1.22.0',
        'opencv-python-headless>=4.5.0',
        'python-dotenv>=0.19.0',
        'pydantic>=1.8.0,<2.0.0',
        'tqdm>=4.64.0',
    ],
    entry_points={
        'console_scripts': [
            'wegpipe=wegpipe.cli:main',
        ],
    },
    python_requires='>=3.8',
    include_package_data=True,
)
