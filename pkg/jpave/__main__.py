from jpave.Cli import main

if __name__ == "__main__":
    main()
