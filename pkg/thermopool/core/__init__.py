# thermopool.core package
